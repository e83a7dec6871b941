//! Maps stage entries onto concrete GPU ids.
//!
//! Tensor-parallel groups have a connectivity requirement: a tp ≥ 2 group
//! must sit inside a single NVLink group, or cover a union of whole NVLink
//! groups. Placement minimizes reload seconds across a stage transition —
//! a replica that keeps both its plan and its exact GPU set carries its
//! weights for free; every other replica (new, re-planned, or merely moved)
//! pays the model's loading time. Up to 8 GPUs the assignment is solved
//! exactly by branch-and-bound; larger nodes fall back to a deterministic
//! greedy pass.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::catalog::{ExecutionPlan, GpuTopology};
use crate::cost::CostTable;
use crate::error::{Error, Result};

/// What one GPU is running.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Occupant {
    pub node_id: String,
    pub model_id: String,
    /// Data-parallel replica index within the entry.
    pub replica: usize,
    /// Tensor-parallel rank within the replica.
    pub rank: usize,
}

/// A model resident on the node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidentModel {
    pub model_id: String,
    pub plan: ExecutionPlan,
    /// Sorted GPU ids per replica.
    pub replica_gpus: Vec<Vec<usize>>,
}

/// GPU assignment after a stage transition.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PlacementState {
    /// Indexed by GPU id.
    pub occupants: Vec<Option<Occupant>>,
    pub resident: BTreeMap<String, ResidentModel>,
}

impl PlacementState {
    pub fn empty(num_gpus: usize) -> Self {
        PlacementState {
            occupants: vec![None; num_gpus],
            resident: BTreeMap::new(),
        }
    }
}

/// One entry to place (from a planned stage).
#[derive(Debug, Clone, PartialEq)]
pub struct PlacementRequest {
    pub node_id: String,
    pub model_id: String,
    pub plan: ExecutionPlan,
}

/// A carried replica that had to change GPUs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoveRecord {
    pub node_id: String,
    pub replica: usize,
    pub from: Vec<usize>,
    pub to: Vec<usize>,
}

/// Result of placing one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacementOutcome {
    pub state: PlacementState,
    /// Total loading seconds across new, re-planned and moved replicas.
    pub reload_cost: f64,
    pub moves: Vec<MoveRecord>,
    /// Loading seconds per replica of each entry (0.0 for kept replicas);
    /// index order matches replica indices.
    pub replica_loads: BTreeMap<String, Vec<f64>>,
}

/// Connectivity rule: a group of 1 GPU is always fine; a larger group must
/// lie inside one NVLink group or be exactly a union of whole NVLink groups.
pub fn is_valid_tp_group(gpus: &[usize], topo: &GpuTopology) -> bool {
    if gpus.len() <= 1 {
        return gpus.iter().all(|&g| g < topo.num_gpus);
    }
    let set: BTreeSet<usize> = gpus.iter().copied().collect();
    if set.len() != gpus.len() || set.iter().any(|&g| g >= topo.num_gpus) {
        return false;
    }
    if topo
        .nvlink_groups
        .iter()
        .any(|grp| set.iter().all(|g| grp.contains(g)))
    {
        return true;
    }
    // Every NVLink group the set touches must be fully covered.
    topo.nvlink_groups
        .iter()
        .filter(|grp| grp.iter().any(|g| set.contains(g)))
        .all(|grp| grp.iter().all(|g| set.contains(g)))
}

fn combinations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    fn rec(items: &[usize], k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..items.len() {
            if items.len() - i < k - cur.len() {
                break;
            }
            cur.push(items[i]);
            rec(items, k, i + 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(items, k, 0, &mut Vec::with_capacity(k), &mut out);
    out
}

/// All valid tp-sized GPU sets drawn from `free`, in lexicographic order.
fn candidate_groups(free: &BTreeSet<usize>, tp: usize, topo: &GpuTopology) -> Vec<Vec<usize>> {
    if tp == 1 {
        return free.iter().map(|&g| vec![g]).collect();
    }
    let mut out: BTreeSet<Vec<usize>> = BTreeSet::new();
    // Sets within one NVLink group.
    for grp in &topo.nvlink_groups {
        let mut avail: Vec<usize> = grp.iter().copied().filter(|g| free.contains(g)).collect();
        avail.sort_unstable();
        for mut set in combinations(&avail, tp) {
            set.sort_unstable();
            out.insert(set);
        }
    }
    // Unions of whole (fully free) NVLink groups totalling tp GPUs.
    let whole: Vec<&Vec<usize>> = topo
        .nvlink_groups
        .iter()
        .filter(|grp| grp.iter().all(|g| free.contains(g)))
        .collect();
    let mut stack: Vec<(usize, Vec<usize>)> = vec![(0, Vec::new())];
    while let Some((from, acc)) = stack.pop() {
        if acc.len() == tp {
            let mut set = acc.clone();
            set.sort_unstable();
            out.insert(set);
            continue;
        }
        for i in from..whole.len() {
            if acc.len() + whole[i].len() <= tp {
                let mut next = acc.clone();
                next.extend(whole[i].iter().copied());
                stack.push((i + 1, next));
            }
        }
    }
    out.into_iter().collect()
}

struct ReplicaSlot {
    entry: usize,
    replica: usize,
    tp: usize,
    /// GPU set the replica held in the previous stage under the same plan,
    /// if it can be kept for free.
    keep: Option<Vec<usize>>,
    /// Loading seconds when not kept.
    load: f64,
}

struct Search<'a> {
    slots: &'a [ReplicaSlot],
    topo: &'a GpuTopology,
    /// Minimum unavoidable cost from slot i onward (new/re-planned slots).
    suffix_floor: Vec<f64>,
    best_cost: f64,
    best: Option<Vec<Vec<usize>>>,
    chosen: Vec<Vec<usize>>,
}

impl<'a> Search<'a> {
    fn run(&mut self, i: usize, free: &mut BTreeSet<usize>, cost: f64) {
        if self.best.is_some() && cost + self.suffix_floor[i] >= self.best_cost {
            return;
        }
        if i == self.slots.len() {
            self.best_cost = cost;
            self.best = Some(self.chosen.clone());
            return;
        }
        let slot = &self.slots[i];
        // Keeping the previous set costs nothing; try it first so the
        // zero-reload assignment is found (and kept on ties).
        if let Some(keep) = &slot.keep {
            if keep.iter().all(|g| free.contains(g)) {
                for g in keep {
                    free.remove(g);
                }
                self.chosen.push(keep.clone());
                self.run(i + 1, free, cost);
                self.chosen.pop();
                for g in keep {
                    free.insert(*g);
                }
            }
        }
        for cand in candidate_groups(free, slot.tp, self.topo) {
            if slot.keep.as_ref() == Some(&cand) {
                continue; // already tried for free
            }
            for g in &cand {
                free.remove(g);
            }
            self.chosen.push(cand.clone());
            self.run(i + 1, free, cost + slot.load);
            self.chosen.pop();
            for g in &cand {
                free.insert(*g);
            }
        }
    }
}

/// Places a stage's entries, minimizing reload seconds given the previous
/// stage's residency. Exact for nodes of up to 8 GPUs, greedy beyond.
pub fn place_stage(
    prev: &PlacementState,
    entries: &[PlacementRequest],
    topo: &GpuTopology,
    table: &CostTable,
) -> Result<PlacementOutcome> {
    place_stage_pinned(prev, entries, &BTreeSet::new(), topo, table)
}

/// Like [`place_stage`], but entries named in `pinned` must keep exactly the
/// GPU sets they hold in `prev` (the caller guarantees they ran there under
/// the same plan). Used during replay, where a continuing model's engine
/// state is tied to its GPUs and a relocation would invalidate it.
pub fn place_stage_pinned(
    prev: &PlacementState,
    entries: &[PlacementRequest],
    pinned: &BTreeSet<String>,
    topo: &GpuTopology,
    table: &CostTable,
) -> Result<PlacementOutcome> {
    let total: u64 = entries.iter().map(|e| e.plan.gpus_required()).sum();
    if total > topo.num_gpus as u64 {
        return Err(Error::Infeasible(format!(
            "stage needs {} GPUs but the node has {}",
            total, topo.num_gpus
        )));
    }
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| entries[a].node_id.cmp(&entries[b].node_id));

    let mut free: BTreeSet<usize> = (0..topo.num_gpus).collect();
    let mut pinned_sets: BTreeMap<usize, &ResidentModel> = BTreeMap::new();
    for &ei in &order {
        let e = &entries[ei];
        if !pinned.contains(&e.node_id) {
            continue;
        }
        let res = prev
            .resident
            .get(&e.node_id)
            .filter(|r| r.plan == e.plan && r.model_id == e.model_id)
            .ok_or_else(|| {
                Error::Config(format!(
                    "internal: '{}' is pinned but was not resident under {}",
                    e.node_id, e.plan
                ))
            })?;
        for gpus in &res.replica_gpus {
            for g in gpus {
                if !free.remove(g) {
                    return Err(Error::Config(format!(
                        "internal: pinned entries overlap on GPU {}",
                        g
                    )));
                }
            }
        }
        pinned_sets.insert(ei, res);
    }

    let mut slots: Vec<ReplicaSlot> = Vec::new();
    for &ei in &order {
        let e = &entries[ei];
        if pinned_sets.contains_key(&ei) {
            continue;
        }
        let load = table.loading_time(&e.model_id, e.plan)?;
        let carried = prev
            .resident
            .get(&e.node_id)
            .filter(|r| r.plan == e.plan && r.model_id == e.model_id);
        for r in 0..e.plan.dp as usize {
            slots.push(ReplicaSlot {
                entry: ei,
                replica: r,
                tp: e.plan.tp as usize,
                keep: carried.map(|res| res.replica_gpus[r].clone()),
                load,
            });
        }
    }

    let mut suffix_floor = vec![0.0; slots.len() + 1];
    for i in (0..slots.len()).rev() {
        let unavoidable = if slots[i].keep.is_some() { 0.0 } else { slots[i].load };
        suffix_floor[i] = suffix_floor[i + 1] + unavoidable;
    }
    let assignment: Vec<Vec<usize>> = if topo.num_gpus <= 8 {
        let mut search = Search {
            slots: &slots,
            topo,
            suffix_floor,
            best_cost: f64::INFINITY,
            best: None,
            chosen: Vec::new(),
        };
        search.run(0, &mut free, 0.0);
        search.best.ok_or_else(|| {
            Error::Infeasible(format!(
                "no NVLink-feasible GPU assignment for entries [{}]",
                entries
                    .iter()
                    .map(|e| format!("{} ({})", e.node_id, e.plan))
                    .collect::<Vec<_>>()
                    .join(", ")
            ))
        })?
    } else {
        // Greedy: keep what can be kept, then place the rest largest-tp
        // first, taking the lexicographically smallest valid set.
        let mut picked: Vec<Option<Vec<usize>>> = vec![None; slots.len()];
        for (i, slot) in slots.iter().enumerate() {
            if let Some(keep) = &slot.keep {
                if keep.iter().all(|g| free.contains(g)) {
                    for g in keep {
                        free.remove(g);
                    }
                    picked[i] = Some(keep.clone());
                }
            }
        }
        let mut rest: Vec<usize> = (0..slots.len()).filter(|&i| picked[i].is_none()).collect();
        rest.sort_by_key(|&i| std::cmp::Reverse(slots[i].tp));
        for i in rest {
            let cand = candidate_groups(&free, slots[i].tp, topo)
                .into_iter()
                .next()
                .ok_or_else(|| {
                    let e = &entries[slots[i].entry];
                    Error::Infeasible(format!(
                        "no NVLink-feasible GPU set left for {} ({}) replica {}",
                        e.node_id, e.plan, slots[i].replica
                    ))
                })?;
            for g in &cand {
                free.remove(g);
            }
            picked[i] = Some(cand);
        }
        picked.into_iter().map(|p| p.expect("all slots placed")).collect()
    };

    // Assemble the new state and the cost/move accounting.
    let mut state = PlacementState::empty(topo.num_gpus);
    let mut reload_cost = 0.0;
    let mut moves = Vec::new();
    let mut replica_loads: BTreeMap<String, Vec<f64>> = entries
        .iter()
        .map(|e| (e.node_id.clone(), vec![0.0; e.plan.dp as usize]))
        .collect();
    for (&ei, res) in &pinned_sets {
        let e = &entries[ei];
        state.resident.insert(e.node_id.clone(), (*res).clone());
        for (replica, gpus) in res.replica_gpus.iter().enumerate() {
            for (rank, &g) in gpus.iter().enumerate() {
                state.occupants[g] = Some(Occupant {
                    node_id: e.node_id.clone(),
                    model_id: e.model_id.clone(),
                    replica,
                    rank,
                });
            }
        }
    }
    for (slot, gpus) in slots.iter().zip(&assignment) {
        let e = &entries[slot.entry];
        let kept = slot.keep.as_ref() == Some(gpus);
        if !kept {
            reload_cost += slot.load;
            replica_loads.get_mut(&e.node_id).expect("entry present")[slot.replica] = slot.load;
            if let Some(from) = &slot.keep {
                moves.push(MoveRecord {
                    node_id: e.node_id.clone(),
                    replica: slot.replica,
                    from: from.clone(),
                    to: gpus.clone(),
                });
            }
        }
        for (rank, &g) in gpus.iter().enumerate() {
            state.occupants[g] = Some(Occupant {
                node_id: e.node_id.clone(),
                model_id: e.model_id.clone(),
                replica: slot.replica,
                rank,
            });
        }
        state
            .resident
            .entry(e.node_id.clone())
            .or_insert_with(|| ResidentModel {
                model_id: e.model_id.clone(),
                plan: e.plan,
                replica_gpus: vec![Vec::new(); e.plan.dp as usize],
            })
            .replica_gpus[slot.replica] = gpus.clone();
    }
    Ok(PlacementOutcome {
        state,
        reload_cost,
        moves,
        replica_loads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paired_topology(n: usize) -> GpuTopology {
        GpuTopology {
            num_gpus: n,
            mem_bytes_per_gpu: 1 << 30,
            nvlink_groups: (0..n / 2).map(|g| vec![2 * g, 2 * g + 1]).collect(),
            reserved_mem_fraction: 0.0,
        }
    }

    fn table_with(loads: &[(&str, ExecutionPlan, f64)]) -> CostTable {
        let mut t = CostTable::new();
        for (m, p, s) in loads {
            t.set_loading(m, *p, *s);
        }
        t
    }

    fn req(node: &str, plan: ExecutionPlan) -> PlacementRequest {
        PlacementRequest {
            node_id: node.into(),
            model_id: format!("model-{}", node),
            plan,
        }
    }

    #[test]
    fn tp_groups_follow_the_nvlink_rule() {
        let topo = paired_topology(4);
        assert!(is_valid_tp_group(&[0], &topo));
        assert!(is_valid_tp_group(&[0, 1], &topo));
        assert!(is_valid_tp_group(&[2, 3], &topo));
        assert!(!is_valid_tp_group(&[1, 2], &topo));
        assert!(!is_valid_tp_group(&[0, 2], &topo));
        // Union of both complete pairs is allowed; a partial union is not.
        assert!(is_valid_tp_group(&[0, 1, 2, 3], &topo));
        assert!(!is_valid_tp_group(&[0, 1, 2], &topo));
        // Out-of-range and duplicate ids are rejected.
        assert!(!is_valid_tp_group(&[3, 4], &topo));
        assert!(!is_valid_tp_group(&[1, 1], &topo));
    }

    #[test]
    fn pair_machine_places_tp2_only_on_whole_pairs() {
        let topo = paired_topology(4);
        let table = table_with(&[("model-a", ExecutionPlan::new(1, 2), 3.0)]);
        let out = place_stage(
            &PlacementState::empty(4),
            &[req("a", ExecutionPlan::new(1, 2))],
            &topo,
            &table,
        )
        .unwrap();
        let gpus = &out.state.resident["a"].replica_gpus[0];
        assert!(gpus == &vec![0, 1] || gpus == &vec![2, 3]);
        assert_eq!(out.reload_cost, 3.0);
    }

    #[test]
    fn repeating_a_stage_costs_nothing() {
        let topo = paired_topology(4);
        let table = table_with(&[
            ("model-a", ExecutionPlan::new(1, 2), 3.0),
            ("model-b", ExecutionPlan::new(2, 1), 7.0),
        ]);
        let entries = vec![req("a", ExecutionPlan::new(1, 2)), req("b", ExecutionPlan::new(2, 1))];
        let first = place_stage(&PlacementState::empty(4), &entries, &topo, &table).unwrap();
        // Reload cost sums per replica: 3 for a, and 7 for each of b's two.
        assert_eq!(first.reload_cost, 17.0);
        let second = place_stage(&first.state, &entries, &topo, &table).unwrap();
        assert_eq!(second.reload_cost, 0.0);
        assert!(second.moves.is_empty());
        assert_eq!(second.state, first.state);
    }

    #[test]
    fn cheaper_model_is_the_one_that_moves() {
        // Carried tp1 models sit on GPUs 1 and 2; a new tp2 model needs a
        // whole pair, so one of them must move. Moving "cheap" (5 s) beats
        // moving "dear" (100 s).
        let topo = paired_topology(4);
        let table = table_with(&[
            ("model-cheap", ExecutionPlan::new(1, 1), 5.0),
            ("model-dear", ExecutionPlan::new(1, 1), 100.0),
            ("model-new", ExecutionPlan::new(1, 2), 2.0),
        ]);
        let mut prev = PlacementState::empty(4);
        prev.resident.insert(
            "cheap".into(),
            ResidentModel {
                model_id: "model-cheap".into(),
                plan: ExecutionPlan::new(1, 1),
                replica_gpus: vec![vec![1]],
            },
        );
        prev.resident.insert(
            "dear".into(),
            ResidentModel {
                model_id: "model-dear".into(),
                plan: ExecutionPlan::new(1, 1),
                replica_gpus: vec![vec![2]],
            },
        );
        let entries = vec![
            req("cheap", ExecutionPlan::new(1, 1)),
            req("dear", ExecutionPlan::new(1, 1)),
            req("new", ExecutionPlan::new(1, 2)),
        ];
        let out = place_stage(&prev, &entries, &topo, &table).unwrap();
        assert_eq!(out.reload_cost, 2.0 + 5.0);
        assert_eq!(out.moves.len(), 1);
        assert_eq!(out.moves[0].node_id, "cheap");
        assert_eq!(out.state.resident["dear"].replica_gpus[0], vec![2]);
        assert_eq!(out.state.resident["new"].replica_gpus[0], vec![0, 1]);
        assert_eq!(out.replica_loads["cheap"], vec![5.0]);
        assert_eq!(out.replica_loads["dear"], vec![0.0]);
        assert_eq!(out.replica_loads["new"], vec![2.0]);
    }

    #[test]
    fn infeasible_connectivity_is_reported() {
        // A tp3 group fits in neither a pair nor a union of whole pairs.
        let topo = paired_topology(4);
        let table = table_with(&[("model-a", ExecutionPlan::new(1, 3), 1.0)]);
        let err = place_stage(
            &PlacementState::empty(4),
            &[req("a", ExecutionPlan::new(1, 3))],
            &topo,
            &table,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)), "got {:?}", err);
        assert!(err.to_string().contains('a'));
    }

    #[test]
    fn greedy_path_handles_sixteen_gpus() {
        let topo = paired_topology(16);
        let table = table_with(&[
            ("model-a", ExecutionPlan::new(2, 4), 1.0),
            ("model-b", ExecutionPlan::new(4, 2), 1.0),
        ]);
        let entries = vec![req("a", ExecutionPlan::new(2, 4)), req("b", ExecutionPlan::new(4, 2))];
        let out = place_stage(&PlacementState::empty(16), &entries, &topo, &table).unwrap();
        for res in out.state.resident.values() {
            for gpus in &res.replica_gpus {
                assert!(is_valid_tp_group(gpus, &topo));
            }
        }
        // All 16 GPUs are booked exactly once.
        let occupied = out.state.occupants.iter().filter(|o| o.is_some()).count();
        assert_eq!(occupied, 16);
    }
}
