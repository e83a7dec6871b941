//! Request sets and their dependency-derived lengths and ready times.
//!
//! A request's prompt length is only known once all its predecessors have
//! completed: concatenation-style links add the predecessor's output length
//! plus the crossing edge's prompt overhead to the base length. The same
//! moment fixes the request's ready time and clamps its (pre-drawn) output
//! length to the room the prompt leaves under the model's context limit.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::catalog::ModelSpec;
use crate::error::{Error, Result};
use crate::graph::AppGraph;
use crate::lengths::{clamp_output_length, unit_variate, OutputLengthEcdf};

/// How a predecessor's completion affects the dependent's prompt length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthTransfer {
    /// The predecessor's output (plus edge overhead) joins the prompt.
    AddOutputLen,
    /// Ordering dependency only; no tokens transfer.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predecessor {
    pub request_id: String,
    pub transfer: LengthTransfer,
}

/// One request as written in a request file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestSpec {
    pub id: String,
    pub node_id: String,
    /// Prompt tokens present before any predecessor output is added.
    pub base_input_len: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub predecessors: Vec<Predecessor>,
    /// Whether the request can run immediately. Derived: true iff it has no
    /// predecessors. Recomputed on load; kept for file readability.
    #[serde(default)]
    pub ready: bool,
}

/// Mutable per-request progress tracked through planning and replay.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestState {
    pub spec: RequestSpec,
    /// Stable arrival tie-breaker: position in the request file.
    pub seq: u64,
    /// Resolved prompt length; `None` until all predecessors completed.
    pub input_len: Option<u64>,
    /// Absolute time the request became runnable.
    pub ready_time: Option<f64>,
    /// Output length drawn from the eCDF (or given by an oracle), before the
    /// context-room clamp.
    pub raw_output_len: Option<u64>,
    /// Final output length, fixed when the request becomes ready.
    pub output_len: Option<u64>,
    /// Tokens generated so far.
    pub generated: u64,
    pub finished: bool,
    pub finish_time: Option<f64>,
}

impl RequestState {
    /// Prompt tokens a (re-)prefill must process: the resolved input plus any
    /// previously generated prefix (recompute-on-readmit preemption).
    pub fn prompt_len(&self) -> u64 {
        self.input_len.expect("prompt_len on unresolved request") + self.generated
    }

    pub fn is_ready(&self) -> bool {
        self.ready_time.is_some() && !self.finished
    }
}

/// All requests of an application, indexed by node and by id.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadState {
    requests: Vec<RequestState>,
    by_id: BTreeMap<String, usize>,
    by_node: BTreeMap<String, Vec<usize>>,
    dependents: BTreeMap<String, Vec<usize>>,
    /// node -> (max_seq_len, sampling cap) copied from models and the graph.
    node_limits: BTreeMap<String, (u64, Option<u64>)>,
}

impl WorkloadState {
    /// Builds the workload from parsed request specs, validating ids, node
    /// references and predecessor wiring against the (fused) graph.
    pub fn new(graph: &AppGraph, models: &[ModelSpec], specs: &[RequestSpec]) -> Result<Self> {
        let model_by_id: BTreeMap<&str, &ModelSpec> =
            models.iter().map(|m| (m.id.as_str(), m)).collect();
        let mut node_limits = BTreeMap::new();
        for node in &graph.nodes {
            let model = model_by_id.get(node.model_id.as_str()).ok_or_else(|| {
                Error::Config(format!(
                    "application node '{}' references unknown model '{}'",
                    node.id, node.model_id
                ))
            })?;
            node_limits.insert(node.id.clone(), (model.max_seq_len, node.max_output_tokens));
        }

        let mut requests = Vec::with_capacity(specs.len());
        let mut by_id = BTreeMap::new();
        let mut by_node: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (seq, spec) in specs.iter().enumerate() {
            if graph.node(&spec.node_id).is_none() {
                return Err(Error::Mismatch(format!(
                    "request '{}' targets unknown node '{}'",
                    spec.id, spec.node_id
                )));
            }
            if by_id.insert(spec.id.clone(), seq).is_some() {
                return Err(Error::Config(format!("duplicate request id '{}'", spec.id)));
            }
            by_node.entry(spec.node_id.clone()).or_default().push(seq);
            let mut spec = spec.clone();
            spec.ready = spec.predecessors.is_empty();
            requests.push(RequestState {
                spec,
                seq: seq as u64,
                input_len: None,
                ready_time: None,
                raw_output_len: None,
                output_len: None,
                generated: 0,
                finished: false,
                finish_time: None,
            });
        }

        let mut dependents: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (idx, req) in requests.iter().enumerate() {
            for pred in &req.spec.predecessors {
                let pred_idx = *by_id.get(&pred.request_id).ok_or_else(|| {
                    Error::Mismatch(format!(
                        "request '{}' names unknown predecessor '{}'",
                        req.spec.id, pred.request_id
                    ))
                })?;
                let pred_node = &requests[pred_idx].spec.node_id;
                let this_node = &req.spec.node_id;
                if pred_node != this_node && graph.edge(pred_node, this_node).is_none() {
                    return Err(Error::Mismatch(format!(
                        "request '{}' depends on '{}' but the graph has no edge {} -> {}",
                        req.spec.id, pred.request_id, pred_node, this_node
                    )));
                }
                dependents
                    .entry(pred.request_id.clone())
                    .or_default()
                    .push(idx);
            }
        }

        Ok(WorkloadState {
            requests,
            by_id,
            by_node,
            dependents,
            node_limits,
        })
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    pub fn request(&self, idx: usize) -> &RequestState {
        &self.requests[idx]
    }

    pub fn request_mut(&mut self, idx: usize) -> &mut RequestState {
        &mut self.requests[idx]
    }

    pub fn request_by_id(&self, id: &str) -> Option<&RequestState> {
        self.by_id.get(id).map(|&i| &self.requests[i])
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn node_requests(&self, node_id: &str) -> &[usize] {
        self.by_node.get(node_id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// All node ids that own at least one request, in sorted order.
    pub fn by_node_ids(&self) -> impl Iterator<Item = &str> {
        self.by_node.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &RequestState> {
        self.requests.iter()
    }

    /// Nodes that still have unfinished requests. Nodes with no requests at
    /// all count as finished.
    pub fn unfinished_nodes(&self) -> BTreeSet<String> {
        self.by_node
            .iter()
            .filter(|(_, idxs)| idxs.iter().any(|&i| !self.requests[i].finished))
            .map(|(node, _)| node.clone())
            .collect()
    }

    pub fn node_is_finished(&self, node_id: &str) -> bool {
        self.node_requests(node_id)
            .iter()
            .all(|&i| self.requests[i].finished)
    }

    pub fn all_finished(&self) -> bool {
        self.requests.iter().all(|r| r.finished)
    }

    /// Unfinished output tokens of a node (only counts requests whose length
    /// is already resolved; blocked requests contribute zero until resolved).
    pub fn remaining_tokens(&self, node_id: &str) -> u64 {
        self.node_requests(node_id)
            .iter()
            .map(|&i| {
                let r = &self.requests[i];
                match (r.finished, r.output_len) {
                    (false, Some(out)) => out - r.generated.min(out),
                    _ => 0,
                }
            })
            .sum()
    }

    pub fn unfinished_request_count(&self, node_id: &str) -> usize {
        self.node_requests(node_id)
            .iter()
            .filter(|&&i| !self.requests[i].finished)
            .count()
    }

    /// Records the pre-clamp output length of one request (an eCDF draw or an
    /// oracle value).
    pub fn set_raw_output_length(&mut self, request_id: &str, raw: u64) -> Result<()> {
        let idx = *self.by_id.get(request_id).ok_or_else(|| {
            Error::Mismatch(format!("unknown request id '{}'", request_id))
        })?;
        self.requests[idx].raw_output_len = Some(raw);
        Ok(())
    }

    /// Marks every predecessor-free request ready at t=0 and fixes its
    /// lengths. Call once after all raw output lengths are set.
    pub fn resolve_roots(&mut self) -> Result<()> {
        for idx in 0..self.requests.len() {
            if self.requests[idx].spec.predecessors.is_empty() {
                self.resolve_request(idx, self.requests[idx].spec.base_input_len, 0.0)?;
            }
        }
        Ok(())
    }

    fn resolve_request(&mut self, idx: usize, input_len: u64, ready_time: f64) -> Result<()> {
        let (l_max, _) = *self
            .node_limits
            .get(&self.requests[idx].spec.node_id)
            .expect("validated node");
        let req = &mut self.requests[idx];
        if input_len > l_max {
            return Err(Error::Config(format!(
                "request '{}': resolved input length {} exceeds max_seq_len {}",
                req.spec.id, input_len, l_max
            )));
        }
        let raw = req.raw_output_len.ok_or_else(|| {
            Error::Config(format!(
                "request '{}' has no output length draw",
                req.spec.id
            ))
        })?;
        req.input_len = Some(input_len);
        req.ready_time = Some(ready_time);
        req.output_len = Some(clamp_output_length(raw, input_len, l_max, None));
        Ok(())
    }

    /// Completes `request_id` with `out_len` tokens at time `at`, resolving
    /// every dependent whose predecessors are now all finished. Returns the
    /// indices of the newly ready requests.
    pub fn derive_request_lengths(
        &mut self,
        graph: &AppGraph,
        request_id: &str,
        out_len: u64,
        at: f64,
    ) -> Result<Vec<usize>> {
        let idx = *self.by_id.get(request_id).ok_or_else(|| {
            Error::Mismatch(format!("unknown request id '{}'", request_id))
        })?;
        {
            let req = &mut self.requests[idx];
            req.output_len = Some(out_len);
            req.generated = out_len;
            req.finished = true;
            req.finish_time = Some(at);
        }

        let mut newly_ready = Vec::new();
        let dependents = self.dependents.get(request_id).cloned().unwrap_or_default();
        for dep_idx in dependents {
            if self.requests[dep_idx].ready_time.is_some() {
                continue;
            }
            let preds = self.requests[dep_idx].spec.predecessors.clone();
            let all_done = preds
                .iter()
                .all(|p| self.requests[self.by_id[&p.request_id]].finished);
            if !all_done {
                continue;
            }
            let dst_node = self.requests[dep_idx].spec.node_id.clone();
            let mut input_len = self.requests[dep_idx].spec.base_input_len;
            let mut ready_time: f64 = 0.0;
            for p in &preds {
                let pred = &self.requests[self.by_id[&p.request_id]];
                ready_time = ready_time.max(pred.finish_time.unwrap_or(0.0));
                if p.transfer == LengthTransfer::AddOutputLen {
                    let out = pred.output_len.unwrap_or(0);
                    input_len += out + graph.transfer_overhead(&pred.spec.node_id, &dst_node);
                }
            }
            self.resolve_request(dep_idx, input_len, ready_time)?;
            self.requests[dep_idx].spec.ready = true;
            newly_ready.push(dep_idx);
        }
        Ok(newly_ready)
    }

    /// Sampling cap configured for a node, if any.
    pub fn node_cap(&self, node_id: &str) -> Option<u64> {
        self.node_limits.get(node_id).and_then(|&(_, cap)| cap)
    }

    /// The model context limit for a node.
    pub fn node_l_max(&self, node_id: &str) -> Option<u64> {
        self.node_limits.get(node_id).map(|&(l_max, _)| l_max)
    }

    /// Draws a raw output length for every request from its model's eCDF,
    /// applying the node's generation cap at the draw site. The context-room
    /// clamp happens later, when the request's prompt length is resolved.
    /// Deterministic in `(seed, request id)`; call before [`Self::resolve_roots`].
    pub fn sample_raw_lengths(
        &mut self,
        graph: &AppGraph,
        ecdfs: &BTreeMap<String, OutputLengthEcdf>,
        seed: u64,
    ) -> Result<()> {
        for idx in 0..self.requests.len() {
            let node_id = self.requests[idx].spec.node_id.clone();
            let model_id = &graph.node(&node_id).expect("validated node").model_id;
            let ecdf = ecdfs.get(model_id).ok_or_else(|| {
                Error::Config(format!(
                    "no output-length distribution for model '{}'",
                    model_id
                ))
            })?;
            let mut raw = ecdf.quantile(unit_variate(seed, &self.requests[idx].spec.id));
            if let Some(cap) = self.node_cap(&node_id) {
                raw = raw.min(cap);
            }
            self.requests[idx].raw_output_len = Some(raw);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{AppEdge, AppNode, EdgeMode};

    fn model(id: &str) -> ModelSpec {
        ModelSpec {
            id: id.into(),
            num_layers: 2,
            hidden_dim: 8,
            matmul_weight_sum: 10.0,
            max_seq_len: 10_000,
            weight_bytes: 1,
            kv_bytes_per_token_per_layer: 0,
            allowed_tp: [1].into_iter().collect(),
        }
    }

    fn chain_graph() -> AppGraph {
        AppGraph {
            nodes: vec![
                AppNode { id: "sum".into(), model_id: "m1".into(), max_output_tokens: None },
                AppNode { id: "eval".into(), model_id: "m2".into(), max_output_tokens: None },
            ],
            edges: vec![
                AppEdge { src: "sum".into(), dst: "sum".into(), mode: EdgeMode::Concat, overhead_tokens: 50 },
                AppEdge { src: "sum".into(), dst: "eval".into(), mode: EdgeMode::FilterFinal, overhead_tokens: 20 },
            ],
            chain_overhead: BTreeMap::new(),
        }
    }

    fn req(id: &str, node: &str, base: u64, preds: &[(&str, LengthTransfer)]) -> RequestSpec {
        RequestSpec {
            id: id.into(),
            node_id: node.into(),
            base_input_len: base,
            predecessors: preds
                .iter()
                .map(|(p, t)| Predecessor { request_id: (*p).into(), transfer: *t })
                .collect(),
            ready: false,
        }
    }

    #[test]
    fn chain_input_adds_output_and_overhead() {
        let graph = chain_graph().fuse_self_loops().unwrap();
        let models = [model("m1"), model("m2")];
        let specs = [
            req("c1", "sum", 2048, &[]),
            req("c2", "sum", 2048, &[("c1", LengthTransfer::AddOutputLen)]),
            req("e1", "eval", 100, &[("c2", LengthTransfer::AddOutputLen)]),
        ];
        let mut w = WorkloadState::new(&graph, &models, &specs).unwrap();
        for id in ["c1", "c2", "e1"] {
            w.set_raw_output_length(id, 300).unwrap();
        }
        w.resolve_roots().unwrap();
        assert_eq!(w.request_by_id("c1").unwrap().input_len, Some(2048));
        assert!(w.request_by_id("c2").unwrap().input_len.is_none());

        // c1 finishes with 300 output tokens: next chunk prompt is
        // 2048 + 300 + 50 (chain overhead) = 2398.
        let ready = w.derive_request_lengths(&graph, "c1", 300, 7.0).unwrap();
        assert_eq!(ready.len(), 1);
        let c2 = w.request_by_id("c2").unwrap();
        assert_eq!(c2.input_len, Some(2398));
        assert_eq!(c2.ready_time, Some(7.0));

        // The final summary feeds the evaluator across the filter_final
        // edge: 100 + 250 + 20 = 370.
        let _ = w.derive_request_lengths(&graph, "c2", 250, 9.5).unwrap();
        let e1 = w.request_by_id("e1").unwrap();
        assert_eq!(e1.input_len, Some(370));
        assert_eq!(e1.ready_time, Some(9.5));
    }

    #[test]
    fn ordering_only_predecessors_add_no_tokens() {
        let graph = AppGraph {
            nodes: vec![
                AppNode { id: "a".into(), model_id: "m1".into(), max_output_tokens: None },
                AppNode { id: "b".into(), model_id: "m2".into(), max_output_tokens: None },
            ],
            edges: vec![AppEdge {
                src: "a".into(),
                dst: "b".into(),
                mode: EdgeMode::Concat,
                overhead_tokens: 20,
            }],
            chain_overhead: BTreeMap::new(),
        };
        let models = [model("m1"), model("m2")];
        let specs = [
            req("a1", "a", 10, &[]),
            req("a2", "a", 10, &[]),
            req("b1", "b", 100, &[
                ("a1", LengthTransfer::AddOutputLen),
                ("a2", LengthTransfer::None),
            ]),
        ];
        let mut w = WorkloadState::new(&graph, &models, &specs).unwrap();
        for id in ["a1", "a2", "b1"] {
            w.set_raw_output_length(id, 300).unwrap();
        }
        w.resolve_roots().unwrap();
        assert!(w.derive_request_lengths(&graph, "a1", 300, 1.0).unwrap().is_empty());
        let ready = w.derive_request_lengths(&graph, "a2", 55, 4.0).unwrap();
        assert_eq!(ready.len(), 1);
        let b1 = w.request_by_id("b1").unwrap();
        // 100 base + (300 + 20) from a1; a2 contributes ordering only.
        assert_eq!(b1.input_len, Some(420));
        assert_eq!(b1.ready_time, Some(4.0));
    }

    #[test]
    fn dangling_predecessors_are_rejected() {
        let graph = chain_graph().fuse_self_loops().unwrap();
        let models = [model("m1"), model("m2")];
        let specs = [req("x", "sum", 10, &[("nope", LengthTransfer::AddOutputLen)])];
        let err = WorkloadState::new(&graph, &models, &specs).unwrap_err();
        assert!(err.to_string().contains("unknown predecessor"), "{}", err);
    }

    #[test]
    fn cross_node_links_need_an_edge() {
        let graph = chain_graph().fuse_self_loops().unwrap();
        let models = [model("m1"), model("m2")];
        // eval -> sum has no edge in the graph.
        let specs = [
            req("e1", "eval", 10, &[]),
            req("c1", "sum", 10, &[("e1", LengthTransfer::AddOutputLen)]),
        ];
        let err = WorkloadState::new(&graph, &models, &specs).unwrap_err();
        assert!(err.to_string().contains("no edge"), "{}", err);
    }

    #[test]
    fn resolved_output_is_clamped_by_context_room() {
        let graph = chain_graph().fuse_self_loops().unwrap();
        let mut m1 = model("m1");
        m1.max_seq_len = 120;
        let models = [m1, model("m2")];
        let specs = [req("c1", "sum", 100, &[])];
        let mut w = WorkloadState::new(&graph, &models, &specs).unwrap();
        w.set_raw_output_length("c1", 500).unwrap();
        w.resolve_roots().unwrap();
        assert_eq!(w.request_by_id("c1").unwrap().output_len, Some(20));
    }

    #[test]
    fn overlong_resolved_prompt_is_an_error() {
        let graph = chain_graph().fuse_self_loops().unwrap();
        let mut m1 = model("m1");
        m1.max_seq_len = 50;
        let models = [m1, model("m2")];
        let specs = [req("c1", "sum", 60, &[])];
        let mut w = WorkloadState::new(&graph, &models, &specs).unwrap();
        w.set_raw_output_length("c1", 5).unwrap();
        assert!(w.resolve_roots().is_err());
    }
}
