//! Comparison heuristics sharing the planner's cost model and stage
//! machinery.
//!
//! * `max_heuristic` — run one model at a time, giving it the plan with the
//!   highest simulated throughput (which is not necessarily the most GPUs,
//!   since loading time counts).
//! * `min_heuristic` — run as many ready models as fit, splitting the GPUs
//!   as evenly as possible, picking the best plan combination per stage by
//!   simulated throughput.

use std::collections::BTreeSet;

use crate::catalog::{enumerate_valid_plans, ExecutionPlan};
use crate::error::{Error, Result};
use crate::graph::ready_models;
use crate::planner::{
    commit_stage, forced_entries, stage_metrics, AppPlan, PlannerInputs, PlannerOptions,
    PlannerState, Stage,
};
use crate::workload::WorkloadState;

/// Upper bound on even-split plan combinations evaluated per stage.
pub const MAX_SPLIT_COMBINATIONS: usize = 10_000;

/// Schedules ready models one at a time on the whole node: every stage runs a
/// single model under its highest-throughput valid plan.
pub fn max_heuristic(
    inputs: &PlannerInputs,
    workload: WorkloadState,
    opts: &PlannerOptions,
) -> Result<AppPlan> {
    let mut state = PlannerState::new(workload);
    let mut stages: Vec<Stage> = Vec::new();
    let mut evaluations: u64 = 0;

    while !state.workload.all_finished() {
        let finished = state.finished_nodes(inputs.graph);
        let mut ready = ready_models(inputs.graph, &finished, &BTreeSet::new());
        ready.sort();
        let node_id = ready.into_iter().next().ok_or_else(|| {
            Error::Infeasible("unfinished models remain but none is ready".into())
        })?;
        let model = inputs.model_of(&node_id)?;

        let mut best: Option<(f64, ExecutionPlan)> = None;
        for plan in enumerate_valid_plans(model, inputs.topo) {
            let chosen = vec![(node_id.clone(), plan)];
            evaluations += 1;
            let outcome = stage_metrics(inputs, &state, &chosen, opts.max_num_seqs)?;
            // Plans are enumerated smallest-footprint first, so keeping the
            // incumbent on ties prefers fewer GPUs.
            if best.map_or(true, |(t, _)| outcome.throughput > t) {
                best = Some((outcome.throughput, plan));
            }
        }
        let (_, plan) = best.ok_or_else(|| {
            Error::Infeasible(format!("model '{}' has no valid execution plan", model.id))
        })?;
        let (stage, _) = commit_stage(inputs, &mut state, &[(node_id, plan)], opts.max_num_seqs)?;
        stages.push(stage);
    }

    Ok(AppPlan {
        algorithm: "max".into(),
        seed: opts.seed,
        max_num_seqs: opts.max_num_seqs,
        allow_preemption: opts.allow_preemption,
        total_latency: state.clock,
        stages,
        candidate_evaluations: evaluations,
    })
}

/// Smallest GPU footprint of any valid plan for the node's model.
fn min_footprint(inputs: &PlannerInputs, node_id: &str) -> Result<u64> {
    let model = inputs.model_of(node_id)?;
    enumerate_valid_plans(model, inputs.topo)
        .first()
        .map(|p| p.gpus_required())
        .ok_or_else(|| Error::Infeasible(format!("model '{}' has no valid execution plan", model.id)))
}

/// Valid plans using the largest footprint that fits `budget` GPUs.
fn plans_for_budget(
    inputs: &PlannerInputs,
    node_id: &str,
    budget: u64,
) -> Result<Vec<ExecutionPlan>> {
    let model = inputs.model_of(node_id)?;
    let plans = enumerate_valid_plans(model, inputs.topo);
    let best = plans
        .iter()
        .map(|p| p.gpus_required())
        .filter(|&g| g <= budget)
        .max();
    Ok(match best {
        Some(fp) => plans.into_iter().filter(|p| p.gpus_required() == fp).collect(),
        None => Vec::new(),
    })
}

/// Lexicographic k-subsets of {0..n}.
fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::with_capacity(k), &mut out);
    out
}

/// Splits the GPUs as evenly as possible across as many ready models as fit.
/// Every stage re-plans all unfinished models, unless preemption is disabled,
/// in which case started models keep their previous plan and only the
/// remaining GPUs are split among newcomers.
pub fn min_heuristic(
    inputs: &PlannerInputs,
    workload: WorkloadState,
    opts: &PlannerOptions,
) -> Result<AppPlan> {
    let mut state = PlannerState::new(workload);
    let mut stages: Vec<Stage> = Vec::new();
    let mut evaluations: u64 = 0;
    let n_gpus = inputs.topo.num_gpus as u64;

    while !state.workload.all_finished() {
        let forced = forced_entries(&state, opts);
        let forced_gpus: u64 = forced.iter().map(|(_, p)| p.gpus_required()).sum();
        let finished = state.finished_nodes(inputs.graph);

        // FCFS admission by node id, re-evaluating readiness each round so
        // pipeline successors of admitted models can join the stage.
        let mut extra_nodes: Vec<String> = Vec::new();
        let mut used = forced_gpus;
        loop {
            let members: BTreeSet<String> = forced
                .iter()
                .map(|(n, _)| n.clone())
                .chain(extra_nodes.iter().cloned())
                .collect();
            let mut ready: Vec<String> = ready_models(inputs.graph, &finished, &members)
                .into_iter()
                .filter(|n| !members.contains(n))
                .collect();
            ready.sort();
            let Some(next) = ready.into_iter().next() else { break };
            let fp = min_footprint(inputs, &next)?;
            if used + fp > n_gpus {
                break;
            }
            used += fp;
            extra_nodes.push(next);
        }

        // Evaluate even splits, dropping the most recently admitted model if
        // no split is feasible for the current membership.
        let chosen = loop {
            if extra_nodes.is_empty() {
                if forced.is_empty() {
                    return Err(Error::Infeasible(format!(
                        "no ready model fits on {} GPUs at t={:.3}",
                        n_gpus, state.clock
                    )));
                }
                break forced.clone();
            }
            let k = extra_nodes.len() as u64;
            let budget = n_gpus - forced_gpus;
            let base = budget / k;
            let extra = (budget % k) as usize;

            let mut best: Option<(f64, Vec<(String, ExecutionPlan)>)> = None;
            let mut combos = 0usize;
            'subsets: for subset in subsets(extra_nodes.len(), extra) {
                let mut options: Vec<Vec<ExecutionPlan>> = Vec::with_capacity(extra_nodes.len());
                let mut feasible = true;
                for (i, node) in extra_nodes.iter().enumerate() {
                    let b = base + u64::from(subset.contains(&i));
                    let plans = plans_for_budget(inputs, node, b)?;
                    if plans.is_empty() {
                        feasible = false;
                        break;
                    }
                    options.push(plans);
                }
                if !feasible {
                    continue;
                }
                // Odometer over each model's plan choices.
                let mut pick = vec![0usize; options.len()];
                loop {
                    combos += 1;
                    if combos > MAX_SPLIT_COMBINATIONS {
                        log::warn!(
                            "even-split enumeration truncated at {} combinations",
                            MAX_SPLIT_COMBINATIONS
                        );
                        break 'subsets;
                    }
                    let candidate: Vec<(String, ExecutionPlan)> = forced
                        .iter()
                        .cloned()
                        .chain(
                            extra_nodes
                                .iter()
                                .zip(pick.iter().enumerate())
                                .map(|(n, (i, &j))| (n.clone(), options[i][j])),
                        )
                        .collect();
                    evaluations += 1;
                    match stage_metrics(inputs, &state, &candidate, opts.max_num_seqs) {
                        Ok(outcome) => {
                            if best.as_ref().map_or(true, |(t, _)| outcome.throughput > *t) {
                                best = Some((outcome.throughput, candidate));
                            }
                        }
                        // A combination where no member can finish is skipped.
                        Err(Error::Mismatch(_)) => {}
                        Err(e) => return Err(e),
                    }
                    // Advance the odometer.
                    let mut digit = 0;
                    loop {
                        if digit == pick.len() {
                            break;
                        }
                        pick[digit] += 1;
                        if pick[digit] < options[digit].len() {
                            break;
                        }
                        pick[digit] = 0;
                        digit += 1;
                    }
                    if digit == pick.len() {
                        break;
                    }
                }
            }
            match best {
                Some((_, chosen)) => break chosen,
                None => {
                    extra_nodes.pop();
                }
            }
        };
        let (stage, _) = commit_stage(inputs, &mut state, &chosen, opts.max_num_seqs)?;
        stages.push(stage);
    }

    Ok(AppPlan {
        algorithm: "min".into(),
        seed: opts.seed,
        max_num_seqs: opts.max_num_seqs,
        allow_preemption: opts.allow_preemption,
        total_latency: state.clock,
        stages,
        candidate_evaluations: evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{GpuTopology, ModelSpec};
    use crate::cost::{CostTable, PhaseKind};
    use crate::graph::{AppGraph, AppNode};
    use crate::workload::RequestSpec;
    use std::collections::BTreeMap;

    /// `n` independent single-request models on a `gpus`-GPU node, one output
    /// token per second per request on one GPU, halved at tp2.
    fn fixture(
        n: usize,
        gpus: usize,
    ) -> (AppGraph, BTreeMap<String, ModelSpec>, GpuTopology, CostTable) {
        let nodes: Vec<AppNode> = (0..n)
            .map(|i| AppNode {
                id: format!("n{}", i),
                model_id: format!("m{}", i),
                max_output_tokens: None,
            })
            .collect();
        let graph = AppGraph { nodes, edges: vec![], chain_overhead: Default::default() };
        let mut models = BTreeMap::new();
        let mut table = CostTable::new();
        for i in 0..n {
            let id = format!("m{}", i);
            models.insert(
                id.clone(),
                ModelSpec {
                    id: id.clone(),
                    num_layers: 1,
                    hidden_dim: 4,
                    matmul_weight_sum: 1.0,
                    max_seq_len: 1 << 20,
                    weight_bytes: 0,
                    kv_bytes_per_token_per_layer: 0,
                    allowed_tp: [1, 2].into_iter().collect(),
                },
            );
            for (tp, secs) in [(1u64, 1.0), (2, 0.5)] {
                table.set_phase(&id, tp, PhaseKind::Comp, 1, 0.0, secs);
                table.set_phase(&id, tp, PhaseKind::Prep, 1, 0.0, 0.0);
                table.set_phase(&id, tp, PhaseKind::Samp, 1, 0.0, 0.0);
            }
            for dp in 1..=gpus as u64 {
                if dp <= gpus as u64 {
                    table.set_loading(&id, ExecutionPlan::new(dp, 1), 0.0);
                }
                if 2 * dp <= gpus as u64 {
                    table.set_loading(&id, ExecutionPlan::new(dp, 2), 0.0);
                }
            }
        }
        let topo = GpuTopology {
            num_gpus: gpus,
            mem_bytes_per_gpu: 1 << 30,
            nvlink_groups: (0..gpus / 2).map(|g| vec![2 * g, 2 * g + 1]).collect(),
            reserved_mem_fraction: 0.0,
        };
        (graph, models, topo, table)
    }

    fn single_request_workload(
        graph: &AppGraph,
        models: &BTreeMap<String, ModelSpec>,
        outputs: &[u64],
    ) -> WorkloadState {
        let specs: Vec<RequestSpec> = outputs
            .iter()
            .enumerate()
            .map(|(i, _)| RequestSpec {
                id: format!("r{}", i),
                node_id: format!("n{}", i),
                base_input_len: 1,
                predecessors: vec![],
                ready: true,
            })
            .collect();
        let all: Vec<ModelSpec> = models.values().cloned().collect();
        let mut w = WorkloadState::new(graph, &all, &specs).unwrap();
        for (i, out) in outputs.iter().enumerate() {
            w.set_raw_output_length(&format!("r{}", i), *out).unwrap();
        }
        w.resolve_roots().unwrap();
        w
    }

    #[test]
    fn max_schedules_singletons_in_node_order() {
        let (graph, models, topo, table) = fixture(3, 2);
        let inputs = PlannerInputs { graph: &graph, models: &models, topo: &topo, table: &table };
        let w = single_request_workload(&graph, &models, &[4, 4, 4]);
        let plan = max_heuristic(&inputs, w, &PlannerOptions::default()).unwrap();
        assert_eq!(plan.stages.len(), 3);
        let order: Vec<&str> = plan
            .stages
            .iter()
            .map(|s| s.entries[0].node_id.as_str())
            .collect();
        assert_eq!(order, vec!["n0", "n1", "n2"]);
        assert!(plan.stages.iter().all(|s| s.entries.len() == 1));
        // tp2 halves latency at zero load cost, so each stage uses both GPUs.
        assert!(plan.stages.iter().all(|s| s.entries[0].plan == ExecutionPlan::new(1, 2)));
        assert_eq!(plan.total_latency, 6.0);
    }

    #[test]
    fn max_prefers_throughput_over_gpu_count() {
        let (graph, models, topo, mut table) = fixture(1, 2);
        // Make the 2-GPU plans pay 100 s of loading: 4 tokens in 4 s beats
        // 2 s + 100 s, so the best plan is a single GPU.
        table.set_loading("m0", ExecutionPlan::new(1, 2), 100.0);
        table.set_loading("m0", ExecutionPlan::new(2, 1), 100.0);
        let inputs = PlannerInputs { graph: &graph, models: &models, topo: &topo, table: &table };
        let w = single_request_workload(&graph, &models, &[4]);
        let plan = max_heuristic(&inputs, w, &PlannerOptions::default()).unwrap();
        assert_eq!(plan.stages[0].entries[0].plan, ExecutionPlan::new(1, 1));
        assert_eq!(plan.total_latency, 4.0);
    }

    #[test]
    fn min_splits_evenly_two_models_two_gpus() {
        let (graph, models, topo, table) = fixture(2, 2);
        let inputs = PlannerInputs { graph: &graph, models: &models, topo: &topo, table: &table };
        let w = single_request_workload(&graph, &models, &[4, 4]);
        let plan = min_heuristic(&inputs, w, &PlannerOptions::default()).unwrap();
        assert_eq!(plan.stages[0].entries.len(), 2);
        assert!(plan.stages[0]
            .entries
            .iter()
            .all(|e| e.plan.gpus_required() == 1));
        assert_eq!(plan.total_latency, 4.0);
    }

    #[test]
    fn min_splits_eight_gpus_across_three_models_as_3_3_2() {
        let (graph, models, topo, table) = fixture(3, 8);
        let inputs = PlannerInputs { graph: &graph, models: &models, topo: &topo, table: &table };
        let w = single_request_workload(&graph, &models, &[8, 8, 8]);
        let plan = min_heuristic(&inputs, w, &PlannerOptions::default()).unwrap();
        let mut counts: Vec<u64> = plan.stages[0]
            .entries
            .iter()
            .map(|e| e.plan.gpus_required())
            .collect();
        counts.sort();
        assert_eq!(counts, vec![2, 3, 3]);
        let max = *counts.iter().max().unwrap();
        let min = *counts.iter().min().unwrap();
        assert!(max - min <= 1);
    }

    #[test]
    fn min_leaves_excess_models_waiting() {
        let (graph, models, topo, table) = fixture(3, 2);
        let inputs = PlannerInputs { graph: &graph, models: &models, topo: &topo, table: &table };
        let w = single_request_workload(&graph, &models, &[4, 4, 4]);
        let plan = min_heuristic(&inputs, w, &PlannerOptions::default()).unwrap();
        // Only two models fit; n2 waits for a later stage.
        assert_eq!(plan.stages[0].entries.len(), 2);
        let first: Vec<&str> = plan.stages[0]
            .entries
            .iter()
            .map(|e| e.node_id.as_str())
            .collect();
        assert_eq!(first, vec!["n0", "n1"]);
        assert!(plan
            .stages
            .iter()
            .any(|s| s.entries.iter().any(|e| e.node_id == "n2")));
    }

    #[test]
    fn min_no_preemption_keeps_started_plans() {
        let (graph, models, topo, table) = fixture(3, 2);
        let inputs = PlannerInputs { graph: &graph, models: &models, topo: &topo, table: &table };
        let w = single_request_workload(&graph, &models, &[2, 8, 8]);
        let opts = PlannerOptions { allow_preemption: false, ..Default::default() };
        let plan = min_heuristic(&inputs, w, &opts).unwrap();
        // n0 finishes stage 1 at t=2; n1 keeps its 1-GPU plan afterwards
        // instead of being re-planned onto both GPUs.
        for window in plan.stages.windows(2) {
            for e in &window[1].entries {
                if let Some(prev) = window[0].entries.iter().find(|p| p.node_id == e.node_id) {
                    assert_eq!(prev.plan, e.plan, "{} re-planned", e.node_id);
                }
            }
        }
    }
}
