//! Application graphs: which model feeds which, and how lengths transfer.
//!
//! Nodes are model instances; a directed edge says the destination consumes
//! the source's outputs. Chained invocations of the same model (iterative
//! summarization) appear as self-loops; [`AppGraph::fuse_self_loops`] folds
//! each into its node and keeps the loop's prompt overhead so the chain can
//! be expressed as predecessor-linked requests on a single node.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How outputs of an edge's source become inputs of its destination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeMode {
    /// Outputs are concatenated into the destination prompt.
    Concat,
    /// Each source output becomes its own destination request.
    Independent,
    /// Only the final output of each source chain feeds the destination.
    FilterFinal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppNode {
    pub id: String,
    pub model_id: String,
    /// Generation limit applied to this node's sampled output lengths.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_output_tokens: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppEdge {
    pub src: String,
    pub dst: String,
    pub mode: EdgeMode,
    /// Prompt-template tokens added when source output crosses this edge.
    #[serde(default)]
    pub overhead_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppGraph {
    pub nodes: Vec<AppNode>,
    pub edges: Vec<AppEdge>,
    /// Prompt overhead of fused self-loops, per node. Populated by
    /// [`AppGraph::fuse_self_loops`]; empty in freshly parsed graphs.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub chain_overhead: BTreeMap<String, u64>,
}

impl AppGraph {
    pub fn node(&self, id: &str) -> Option<&AppNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn edge(&self, src: &str, dst: &str) -> Option<&AppEdge> {
        self.edges.iter().find(|e| e.src == src && e.dst == dst)
    }

    /// Distinct predecessor nodes, self-loops excluded.
    pub fn predecessors(&self, id: &str) -> BTreeSet<String> {
        self.edges
            .iter()
            .filter(|e| e.dst == id && e.src != id)
            .map(|e| e.src.clone())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for node in &self.nodes {
            if node.id.is_empty() {
                return Err(Error::Config("application node id must not be empty".into()));
            }
            if !ids.insert(node.id.clone()) {
                return Err(Error::Config(format!("duplicate application node id '{}'", node.id)));
            }
        }
        for edge in &self.edges {
            for end in [&edge.src, &edge.dst] {
                if !ids.contains(end) {
                    return Err(Error::Config(format!(
                        "edge {} -> {} references unknown node '{}'",
                        edge.src, edge.dst, end
                    )));
                }
            }
        }
        Ok(())
    }

    /// Removes self-loop edges, remembering their prompt overhead per node so
    /// that intra-node request chains keep the right input arithmetic.
    /// Errors if a cycle through distinct nodes remains.
    pub fn fuse_self_loops(&self) -> Result<AppGraph> {
        self.validate()?;
        let mut fused = AppGraph {
            nodes: self.nodes.clone(),
            edges: Vec::new(),
            chain_overhead: self.chain_overhead.clone(),
        };
        for edge in &self.edges {
            if edge.src == edge.dst {
                fused.chain_overhead.insert(edge.src.clone(), edge.overhead_tokens);
            } else {
                fused.edges.push(edge.clone());
            }
        }
        fused.topo_order()?;
        Ok(fused)
    }

    /// Topological order of the nodes (self-loops ignored). Errors on cycles
    /// through distinct nodes.
    pub fn topo_order(&self) -> Result<Vec<String>> {
        let mut in_deg: BTreeMap<&str, usize> = self.nodes.iter().map(|n| (n.id.as_str(), 0)).collect();
        for e in &self.edges {
            if e.src != e.dst {
                *in_deg.get_mut(e.dst.as_str()).unwrap() += 1;
            }
        }
        let mut frontier: Vec<&str> = in_deg
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&id, _)| id)
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(id) = frontier.pop() {
            order.push(id.to_string());
            let mut unlocked = Vec::new();
            for e in &self.edges {
                if e.src == id && e.src != e.dst {
                    let d = in_deg.get_mut(e.dst.as_str()).unwrap();
                    *d -= 1;
                    if *d == 0 {
                        unlocked.push(e.dst.as_str());
                    }
                }
            }
            // Keep the frontier sorted so the order is deterministic.
            frontier.extend(unlocked);
            frontier.sort();
            frontier.reverse();
        }
        if order.len() != self.nodes.len() {
            let stuck: Vec<&str> = in_deg
                .iter()
                .filter(|(id, _)| !order.iter().any(|o| o == **id))
                .map(|(&id, _)| id)
                .collect();
            return Err(Error::Config(format!(
                "application graph has a cycle through nodes {:?}",
                stuck
            )));
        }
        Ok(order)
    }

    /// Prompt overhead for a length transfer from `src_node` to `dst_node`:
    /// the fused chain overhead for intra-node links, the edge overhead
    /// otherwise.
    pub fn transfer_overhead(&self, src_node: &str, dst_node: &str) -> u64 {
        if src_node == dst_node {
            self.chain_overhead.get(src_node).copied().unwrap_or(0)
        } else {
            self.edge(src_node, dst_node).map(|e| e.overhead_tokens).unwrap_or(0)
        }
    }
}

/// Nodes whose every predecessor is finished or co-scheduled, and which are
/// not finished themselves (finished nodes never reappear).
pub fn ready_models(
    graph: &AppGraph,
    finished: &BTreeSet<String>,
    selected_in_stage: &BTreeSet<String>,
) -> Vec<String> {
    graph
        .nodes
        .iter()
        .filter(|n| !finished.contains(&n.id))
        .filter(|n| {
            graph
                .predecessors(&n.id)
                .iter()
                .all(|p| finished.contains(p) || selected_in_stage.contains(p))
        })
        .map(|n| n.id.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: &str) -> AppNode {
        AppNode {
            id: id.into(),
            model_id: format!("model-{}", id),
            max_output_tokens: None,
        }
    }

    fn edge(src: &str, dst: &str) -> AppEdge {
        AppEdge {
            src: src.into(),
            dst: dst.into(),
            mode: EdgeMode::Concat,
            overhead_tokens: 0,
        }
    }

    #[test]
    fn diamond_readiness_after_the_source_finishes() {
        let g = AppGraph {
            nodes: vec![node("a"), node("b"), node("c"), node("d")],
            edges: vec![edge("a", "b"), edge("a", "c"), edge("b", "d"), edge("c", "d")],
            chain_overhead: BTreeMap::new(),
        };
        let finished: BTreeSet<String> = ["a".to_string()].into();
        let ready = ready_models(&g, &finished, &BTreeSet::new());
        assert_eq!(ready, vec!["b".to_string(), "c".to_string()]);
        // Co-scheduling b and c makes d ready too (pipeline stage).
        let selected: BTreeSet<String> = ["b".to_string(), "c".to_string()].into();
        let ready = ready_models(&g, &finished, &selected);
        assert_eq!(ready, vec!["b".to_string(), "c".to_string(), "d".to_string()]);
    }

    #[test]
    fn self_loops_fuse_and_keep_their_overhead() {
        let mut loop_edge = edge("a", "a");
        loop_edge.overhead_tokens = 50;
        let g = AppGraph {
            nodes: vec![node("a"), node("b")],
            edges: vec![loop_edge, edge("a", "b")],
            chain_overhead: BTreeMap::new(),
        };
        let fused = g.fuse_self_loops().unwrap();
        assert_eq!(fused.edges.len(), 1);
        assert_eq!(fused.transfer_overhead("a", "a"), 50);
        // A fused self-loop node with only external input is ready at t=0.
        let ready = ready_models(&fused, &BTreeSet::new(), &BTreeSet::new());
        assert_eq!(ready, vec!["a".to_string()]);
    }

    #[test]
    fn cycles_through_distinct_nodes_are_rejected() {
        let g = AppGraph {
            nodes: vec![node("a"), node("b")],
            edges: vec![edge("a", "b"), edge("b", "a")],
            chain_overhead: BTreeMap::new(),
        };
        let err = g.fuse_self_loops().unwrap_err();
        assert!(err.to_string().contains("cycle"), "{}", err);
    }

    #[test]
    fn topo_order_respects_edges() {
        let g = AppGraph {
            nodes: vec![node("c"), node("a"), node("b")],
            edges: vec![edge("a", "b"), edge("b", "c")],
            chain_overhead: BTreeMap::new(),
        };
        assert_eq!(g.topo_order().unwrap(), vec!["a", "b", "c"]);
    }

    #[test]
    fn unknown_edge_endpoints_are_rejected() {
        let g = AppGraph {
            nodes: vec![node("a")],
            edges: vec![edge("a", "zz")],
            chain_overhead: BTreeMap::new(),
        };
        assert!(g.validate().is_err());
    }
}
