//! Iteration-level simulation of a continuous-batching inference engine.
//!
//! Each data-parallel replica runs the usual engine loop: admit waiting
//! requests FCFS into a whole-prompt prefill iteration when they fit (batch
//! slots and KV tokens), otherwise decode one token for every running
//! request. On KV exhaustion during decode the most recently admitted request
//! is preempted (recompute-on-readmit) and requeued at the front. Mixed
//! prefill+decode iterations are not modeled.
//!
//! The simulation is a conservative discrete-event loop over the replicas:
//! the globally earliest next action (a request arrival or a replica's next
//! iteration) is committed first, so dynamically spawned requests — chain
//! successors becoming ready when their predecessor finishes — land in the
//! right queues no matter how replica clocks interleave. Everything is
//! deterministic given the workload: ties break on time, then replica index,
//! then request file order.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::catalog::{ExecutionPlan, GpuTopology, ModelSpec};
use crate::cost::{flops_of, iter_latency, CostTable, IterationDescriptor, IterationKind};
use crate::error::{Error, Result};
use crate::graph::AppGraph;
use crate::workload::WorkloadState;

/// Engine limits for one model replica.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Maximum running requests per replica.
    pub max_num_seqs: u64,
    /// KV-cache capacity per replica, in tokens.
    pub kv_capacity_tokens: u64,
}

pub const DEFAULT_MAX_NUM_SEQS: u64 = 256;

impl EngineConfig {
    /// Derives the per-replica KV capacity from the GPU memory left after the
    /// weight shard: every GPU of a tp group holds `1/tp` of each token's KV.
    pub fn derive(
        model: &ModelSpec,
        plan: ExecutionPlan,
        topo: &GpuTopology,
        max_num_seqs: u64,
    ) -> Result<EngineConfig> {
        if max_num_seqs == 0 {
            return Err(Error::Config("max_num_seqs must be >= 1".into()));
        }
        let tp = plan.tp as f64;
        let free_per_gpu = topo.usable_mem_bytes_per_gpu() - model.weight_bytes as f64 / tp;
        let kv_per_token_per_gpu = model.kv_bytes_per_token() as f64 / tp;
        let capacity = if kv_per_token_per_gpu > 0.0 {
            (free_per_gpu / kv_per_token_per_gpu).floor()
        } else {
            f64::INFINITY
        };
        let capacity = if capacity.is_finite() {
            if capacity < 0.0 {
                0
            } else {
                capacity as u64
            }
        } else {
            u64::MAX >> 16
        };
        if capacity < model.max_seq_len {
            return Err(Error::Infeasible(format!(
                "model '{}' under {}: KV capacity {} tokens cannot hold one max-length sequence ({})",
                model.id, plan, capacity, model.max_seq_len
            )));
        }
        Ok(EngineConfig {
            max_num_seqs,
            kv_capacity_tokens: capacity,
        })
    }
}

/// One committed iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub replica: usize,
    /// Absolute start time, seconds.
    pub start: f64,
    pub descriptor: IterationDescriptor,
    pub flops: f64,
    pub latency: f64,
    /// KV tokens resident on the replica after the iteration.
    pub kv_used: u64,
}

/// Resumable state of one replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaState {
    pub clock: f64,
    /// Waiting request indices, FCFS. Ready times are non-decreasing along
    /// the queue except for requeued preemption victims at the front.
    pub queue: VecDeque<usize>,
    /// Running request indices in admission order.
    pub running: Vec<usize>,
    /// Resident KV tokens.
    pub kv_used: u64,
}

/// Resumable engine state of one model under one plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineSnapshot {
    pub plan: ExecutionPlan,
    /// Round-robin arrival cursor (arrival i goes to replica i % dp).
    pub rr_next: u64,
    pub replicas: Vec<ReplicaState>,
}

/// Outcome of simulating one model.
#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub node_id: String,
    /// Latest engine activity (max replica clock), absolute seconds.
    pub total_time: f64,
    /// When the node finished its whole workload; `None` if truncated first.
    pub completion: Option<f64>,
    pub total_flops: f64,
    pub iterations: Vec<IterationRecord>,
    /// Requests of this node that finished during this run.
    pub finish_times: BTreeMap<String, f64>,
    pub end_state: EngineSnapshot,
}

/// Optional knobs for [`simulate_model`].
#[derive(Debug, Clone, Default)]
pub struct SimOptions {
    /// Absolute start time per replica (model loading shifts). Defaults to 0.
    pub replica_offsets: Option<Vec<f64>>,
    /// Stop before starting any iteration at or after this absolute time and
    /// snapshot the engine instead.
    pub time_limit: Option<f64>,
    /// Resume from a previous snapshot (same plan) instead of starting fresh.
    pub carry: Option<EngineSnapshot>,
}

/// Key ordering arrivals by (time, file order). Times are non-negative, so
/// the IEEE-754 bit pattern orders like the value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct ArrivalKey {
    time_bits: u64,
    seq: u64,
    idx: usize,
}

impl ArrivalKey {
    fn new(time: f64, seq: u64, idx: usize) -> Self {
        debug_assert!(time >= 0.0);
        ArrivalKey {
            time_bits: time.to_bits(),
            seq,
            idx,
        }
    }

    fn time(&self) -> f64 {
        f64::from_bits(self.time_bits)
    }
}

struct Engine<'a> {
    model: &'a ModelSpec,
    plan: ExecutionPlan,
    node_id: &'a str,
    table: &'a CostTable,
    cfg: EngineConfig,
    replicas: Vec<ReplicaState>,
    rr_next: u64,
    arrivals: std::collections::BTreeSet<ArrivalKey>,
    iterations: Vec<IterationRecord>,
    finish_times: BTreeMap<String, f64>,
    total_flops: f64,
}

impl<'a> Engine<'a> {
    /// Earliest time replica `r` could start an iteration, if it has work.
    fn next_start(&self, r: usize, workload: &WorkloadState) -> Option<f64> {
        let rep = &self.replicas[r];
        if !rep.running.is_empty() {
            return Some(rep.clock);
        }
        let &head = rep.queue.front()?;
        let ready = workload
            .request(head)
            .ready_time
            .expect("queued request has a ready time");
        Some(rep.clock.max(ready))
    }

    /// Registers a newly ready request: zero-output requests complete on the
    /// spot (possibly cascading), requests of other nodes are left for their
    /// own simulation, and everything else becomes a pending arrival.
    fn note_ready(
        &mut self,
        workload: &mut WorkloadState,
        graph: &AppGraph,
        idx: usize,
    ) -> Result<()> {
        let req = workload.request(idx);
        if req.finished {
            return Ok(());
        }
        let ready = req.ready_time.expect("ready request has a time");
        if req.output_len == Some(0) {
            let id = req.spec.id.clone();
            let node = req.spec.node_id.clone();
            if node == self.node_id {
                self.finish_times.insert(id.clone(), ready);
            }
            let spawned = workload.derive_request_lengths(graph, &id, 0, ready)?;
            for s in spawned {
                self.note_ready(workload, graph, s)?;
            }
            return Ok(());
        }
        if req.spec.node_id == self.node_id {
            self.arrivals
                .insert(ArrivalKey::new(ready, req.seq, idx));
        }
        Ok(())
    }

    fn assign_arrival(&mut self, key: ArrivalKey) {
        self.arrivals.remove(&key);
        let r = (self.rr_next % self.plan.dp) as usize;
        self.rr_next += 1;
        self.replicas[r].queue.push_back(key.idx);
    }

    /// Completes a request at `at`, releasing KV and cascading readiness.
    fn finish_request(
        &mut self,
        workload: &mut WorkloadState,
        graph: &AppGraph,
        idx: usize,
        at: f64,
    ) -> Result<()> {
        let (id, out) = {
            let req = workload.request(idx);
            (req.spec.id.clone(), req.generated)
        };
        self.finish_times.insert(id.clone(), at);
        let spawned = workload.derive_request_lengths(graph, &id, out, at)?;
        for s in spawned {
            self.note_ready(workload, graph, s)?;
        }
        Ok(())
    }

    /// Runs one iteration on replica `r` starting at `t`.
    fn run_iteration(
        &mut self,
        workload: &mut WorkloadState,
        graph: &AppGraph,
        r: usize,
        t: f64,
    ) -> Result<()> {
        let tp = self.plan.tp;
        // Admission: FCFS from the queue head, no skipping.
        let mut admitted: Vec<usize> = Vec::new();
        let mut kv_projected = self.replicas[r].kv_used;
        loop {
            let rep = &self.replicas[r];
            let Some(&head) = rep.queue.front() else { break };
            let req = workload.request(head);
            if req.ready_time.expect("queued request is resolved") > t {
                break;
            }
            if rep.running.len() + admitted.len() >= self.cfg.max_num_seqs as usize {
                break;
            }
            let need = req.prompt_len() + 1;
            if kv_projected + need > self.cfg.kv_capacity_tokens {
                break;
            }
            kv_projected += need;
            admitted.push(head);
            self.replicas[r].queue.pop_front();
        }

        let (descriptor, finished_at_end) = if !admitted.is_empty() {
            // Whole-prompt prefill of the admitted batch; running requests
            // stall for this iteration.
            let prompts: Vec<u64> = admitted
                .iter()
                .map(|&i| workload.request(i).prompt_len())
                .collect();
            let desc = IterationDescriptor {
                kind: IterationKind::Prefill,
                batch: admitted.len() as u64,
                max_len: prompts.iter().copied().max().unwrap_or(0),
                total_len: prompts.iter().sum(),
            };
            self.replicas[r].kv_used = kv_projected;
            let mut done = Vec::new();
            for &idx in &admitted {
                self.replicas[r].running.push(idx);
                let req = workload.request_mut(idx);
                req.generated += 1;
                if Some(req.generated) == req.output_len {
                    done.push(idx);
                }
            }
            (desc, done)
        } else if !self.replicas[r].running.is_empty() {
            // Decode grows every running request by one token; preempt the
            // most recently admitted request until the growth fits.
            loop {
                let rep = &self.replicas[r];
                let b = rep.running.len() as u64;
                if rep.kv_used + b <= self.cfg.kv_capacity_tokens {
                    break;
                }
                if rep.running.len() == 1 {
                    let idx = rep.running[0];
                    return Err(Error::Infeasible(format!(
                        "request '{}' alone exceeds the KV capacity of {} tokens",
                        workload.request(idx).spec.id,
                        self.cfg.kv_capacity_tokens
                    )));
                }
                let rep = &mut self.replicas[r];
                let victim = rep.running.pop().expect("non-empty running set");
                let req = workload.request(victim);
                rep.kv_used -= req.input_len.expect("resolved") + req.generated;
                rep.queue.push_front(victim);
            }
            let contexts: Vec<u64> = self.replicas[r]
                .running
                .iter()
                .map(|&i| {
                    let req = workload.request(i);
                    req.input_len.expect("resolved") + req.generated
                })
                .collect();
            let desc = IterationDescriptor {
                kind: IterationKind::Decode,
                batch: contexts.len() as u64,
                max_len: contexts.iter().copied().max().unwrap_or(0),
                total_len: contexts.iter().sum(),
            };
            self.replicas[r].kv_used += desc.batch;
            let mut done = Vec::new();
            for &idx in &self.replicas[r].running.clone() {
                let req = workload.request_mut(idx);
                req.generated += 1;
                if Some(req.generated) == req.output_len {
                    done.push(idx);
                }
            }
            (desc, done)
        } else {
            return Err(Error::Config(
                "internal: scheduled an iteration with nothing to run".into(),
            ));
        };

        let flops = flops_of(self.model, &descriptor, tp);
        let latency = iter_latency(self.table, self.model, tp, &descriptor)?.max(0.0);
        let t_end = t + latency;
        self.total_flops += flops;

        for &idx in &finished_at_end {
            let rep = &mut self.replicas[r];
            rep.running.retain(|&i| i != idx);
            let req = workload.request(idx);
            rep.kv_used -= req.input_len.expect("resolved") + req.generated;
            self.finish_request(workload, graph, idx, t_end)?;
        }
        self.iterations.push(IterationRecord {
            replica: r,
            start: t,
            descriptor,
            flops,
            latency,
            kv_used: self.replicas[r].kv_used,
        });
        self.replicas[r].clock = t_end;
        Ok(())
    }
}

/// Simulates one model under one plan until its workload completes or
/// `opts.time_limit` is reached, mutating request progress in `workload`.
pub fn simulate_model(
    model: &ModelSpec,
    plan: ExecutionPlan,
    node_id: &str,
    workload: &mut WorkloadState,
    graph: &AppGraph,
    table: &CostTable,
    cfg: &EngineConfig,
    opts: &SimOptions,
) -> Result<SimResult> {
    if plan.dp == 0 || plan.tp == 0 {
        return Err(Error::Config(format!("degenerate plan {} for '{}'", plan, node_id)));
    }
    let dp = plan.dp as usize;
    let offsets: Vec<f64> = match &opts.replica_offsets {
        Some(o) => {
            if o.len() != dp {
                return Err(Error::Config(format!(
                    "expected {} replica offsets for '{}', got {}",
                    dp,
                    node_id,
                    o.len()
                )));
            }
            o.clone()
        }
        None => vec![0.0; dp],
    };

    let (replicas, rr_next) = match &opts.carry {
        Some(snap) => {
            if snap.plan != plan || snap.replicas.len() != dp {
                return Err(Error::Mismatch(format!(
                    "engine snapshot for '{}' was taken under {} but the stage runs {}",
                    node_id, snap.plan, plan
                )));
            }
            (snap.replicas.clone(), snap.rr_next)
        }
        None => (
            offsets
                .iter()
                .map(|&clock| ReplicaState {
                    clock,
                    queue: VecDeque::new(),
                    running: Vec::new(),
                    kv_used: 0,
                })
                .collect(),
            0,
        ),
    };

    let mut engine = Engine {
        model,
        plan,
        node_id,
        table,
        cfg: *cfg,
        replicas,
        rr_next,
        arrivals: std::collections::BTreeSet::new(),
        iterations: Vec::new(),
        finish_times: BTreeMap::new(),
        total_flops: 0.0,
    };

    // Seed arrivals: ready requests of this node not already tracked by a
    // resumed replica (and any instantly-finishing zero-output request).
    let mut tracked: Vec<bool> = vec![false; workload.len()];
    for rep in &engine.replicas {
        for &i in rep.queue.iter().chain(rep.running.iter()) {
            tracked[i] = true;
        }
    }
    let node_reqs: Vec<usize> = workload.node_requests(node_id).to_vec();
    for idx in node_reqs {
        let req = workload.request(idx);
        if req.finished || tracked[idx] {
            continue;
        }
        if req.ready_time.is_some() {
            engine.note_ready(workload, graph, idx)?;
        }
    }

    let limit = opts.time_limit.unwrap_or(f64::INFINITY);
    loop {
        let next_arrival = engine.arrivals.iter().next().copied();
        let mut next_iter: Option<(f64, usize)> = None;
        for r in 0..dp {
            if let Some(start) = engine.next_start(r, workload) {
                if next_iter.map_or(true, |(t, _)| start < t) {
                    next_iter = Some((start, r));
                }
            }
        }
        let arrival_first = match (next_arrival, next_iter) {
            (Some(a), Some((t, _))) => a.time() <= t,
            (Some(_), None) => true,
            _ => false,
        };
        if arrival_first {
            let key = next_arrival.expect("checked above");
            if key.time() >= limit {
                break;
            }
            engine.assign_arrival(key);
            continue;
        }
        match next_iter {
            Some((t, r)) if t < limit => engine.run_iteration(workload, graph, r, t)?,
            _ => break,
        }
    }

    let total_time = engine
        .replicas
        .iter()
        .map(|r| r.clock)
        .fold(0.0_f64, f64::max);
    let completion = if workload.node_is_finished(node_id) {
        Some(
            workload
                .node_requests(node_id)
                .iter()
                .filter_map(|&i| workload.request(i).finish_time)
                .fold(0.0_f64, f64::max),
        )
    } else {
        None
    };
    Ok(SimResult {
        node_id: node_id.to_string(),
        total_time,
        completion,
        total_flops: engine.total_flops,
        iterations: engine.iterations,
        finish_times: engine.finish_times,
        end_state: EngineSnapshot {
            plan,
            rr_next: engine.rr_next,
            replicas: engine.replicas,
        },
    })
}

/// One model's role in a stage simulation.
#[derive(Debug, Clone)]
pub struct StageEntrySim {
    pub node_id: String,
    pub model_id: String,
    pub plan: ExecutionPlan,
    /// Absolute per-replica start times (stage start plus loading shifts).
    pub replica_offsets: Vec<f64>,
    /// Engine state carried over when the plan is unchanged from the
    /// previous stage.
    pub carry: Option<EngineSnapshot>,
    pub engine: EngineConfig,
}

/// Outcome of one stage simulation.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub start_time: f64,
    /// Absolute stage end: earliest model completion, or the time limit.
    pub end_time: f64,
    pub duration: f64,
    /// FLOPs of all iterations started before `end_time`.
    pub flops: f64,
    /// `flops / duration`.
    pub throughput: f64,
    /// Untruncated completion time per entry (as if the stage ran forever).
    pub completions: BTreeMap<String, f64>,
    /// Entry that ends the stage; `None` when the time limit cuts first.
    pub first_finisher: Option<String>,
    /// Committed (truncated) per-entry runs, with resumable engine states.
    pub results: BTreeMap<String, SimResult>,
}

fn entry_order(entries: &[StageEntrySim], graph: &AppGraph) -> Result<Vec<usize>> {
    let topo = graph.topo_order()?;
    let mut order: Vec<usize> = (0..entries.len()).collect();
    let pos = |node: &str| topo.iter().position(|n| n == node).unwrap_or(usize::MAX);
    order.sort_by_key(|&i| pos(&entries[i].node_id));
    Ok(order)
}

fn run_entries(
    entries: &[StageEntrySim],
    order: &[usize],
    models: &BTreeMap<String, ModelSpec>,
    workload: &mut WorkloadState,
    graph: &AppGraph,
    table: &CostTable,
    time_limit: Option<f64>,
) -> Result<BTreeMap<String, SimResult>> {
    let mut results = BTreeMap::new();
    for &i in order {
        let entry = &entries[i];
        let model = models.get(&entry.model_id).ok_or_else(|| {
            Error::Config(format!("unknown model '{}' in stage entry", entry.model_id))
        })?;
        let opts = SimOptions {
            replica_offsets: Some(entry.replica_offsets.clone()),
            time_limit,
            carry: entry.carry.clone(),
        };
        let result = simulate_model(
            model,
            entry.plan,
            &entry.node_id,
            workload,
            graph,
            table,
            &entry.engine,
            &opts,
        )?;
        results.insert(entry.node_id.clone(), result);
    }
    Ok(results)
}

/// Predicted end time, FLOPs and completions of a stage, without mutating
/// `workload`. Dependent entries are simulated in topological order so
/// upstream finishes feed downstream ready times.
pub fn stage_dry_run(
    entries: &[StageEntrySim],
    workload: &WorkloadState,
    graph: &AppGraph,
    models: &BTreeMap<String, ModelSpec>,
    table: &CostTable,
    start_time: f64,
    time_limit: Option<f64>,
) -> Result<StageOutcome> {
    let order = entry_order(entries, graph)?;
    let mut scratch = workload.clone();
    let results = run_entries(entries, &order, models, &mut scratch, graph, table, None)?;

    let mut completions = BTreeMap::new();
    for (node, result) in &results {
        let completion = result.completion.ok_or_else(|| {
            Error::Mismatch(format!(
                "stage entry '{}' can never finish: its inputs depend on models outside the stage",
                node
            ))
        })?;
        completions.insert(node.clone(), completion);
    }
    let min_completion = completions.values().copied().fold(f64::INFINITY, f64::min);
    let (end_time, first_finisher) = match time_limit {
        Some(limit) if limit < min_completion => (limit, None),
        _ => {
            let first = completions
                .iter()
                .find(|(_, &c)| c == min_completion)
                .map(|(n, _)| n.clone());
            (min_completion, first)
        }
    };

    let flops: f64 = results
        .values()
        .flat_map(|r| r.iterations.iter())
        .filter(|it| it.start < end_time)
        .map(|it| it.flops)
        .sum();
    let duration = end_time - start_time;
    let throughput = if duration > 0.0 { flops / duration } else { 0.0 };
    Ok(StageOutcome {
        start_time,
        end_time,
        duration,
        flops,
        throughput,
        completions,
        first_finisher,
        results,
    })
}

/// Simulates a stage and commits it: every entry is truncated at the stage
/// end (earliest completion or time limit) and `workload` reflects the
/// progress made. The returned results hold resumable engine snapshots.
pub fn simulate_stage(
    entries: &[StageEntrySim],
    workload: &mut WorkloadState,
    graph: &AppGraph,
    models: &BTreeMap<String, ModelSpec>,
    table: &CostTable,
    start_time: f64,
    time_limit: Option<f64>,
) -> Result<StageOutcome> {
    let mut outcome = stage_dry_run(entries, workload, graph, models, table, start_time, time_limit)?;
    let order = entry_order(entries, graph)?;
    let committed = run_entries(
        entries,
        &order,
        models,
        workload,
        graph,
        table,
        Some(outcome.end_time),
    )?;
    // The committed runs are the dry run's prefix up to the stage end.
    outcome.flops = committed
        .values()
        .flat_map(|r| r.iterations.iter())
        .map(|it| it.flops)
        .sum();
    let duration = outcome.end_time - start_time;
    outcome.throughput = if duration > 0.0 { outcome.flops / duration } else { 0.0 };
    outcome.results = committed;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{CostTable, PhaseKind};
    use crate::graph::{AppEdge, AppGraph, AppNode, EdgeMode};
    use crate::workload::{LengthTransfer, Predecessor, RequestSpec};

    fn model() -> ModelSpec {
        ModelSpec {
            id: "m".into(),
            num_layers: 1,
            hidden_dim: 8,
            matmul_weight_sum: 100.0,
            max_seq_len: 4096,
            weight_bytes: 1,
            kv_bytes_per_token_per_layer: 0,
            allowed_tp: [1, 2].into_iter().collect(),
        }
    }

    /// Cost table where every iteration takes exactly one second.
    fn unit_table() -> CostTable {
        let mut t = CostTable::new();
        for tp in [1, 2] {
            t.set_phase("m", tp, PhaseKind::Comp, 1, 0.0, 1.0);
            t.set_phase("m", tp, PhaseKind::Prep, 1, 0.0, 0.0);
            t.set_phase("m", tp, PhaseKind::Samp, 1, 0.0, 0.0);
        }
        t
    }

    fn one_node_graph() -> AppGraph {
        AppGraph {
            nodes: vec![AppNode {
                id: "n".into(),
                model_id: "m".into(),
                max_output_tokens: None,
            }],
            edges: vec![],
            chain_overhead: Default::default(),
        }
    }

    fn request(id: &str, input: u64, _output: u64) -> RequestSpec {
        RequestSpec {
            id: id.into(),
            node_id: "n".into(),
            base_input_len: input,
            predecessors: vec![],
            ready: true,
        }
    }

    fn workload_with(graph: &AppGraph, reqs: &[(RequestSpec, u64)]) -> WorkloadState {
        let specs: Vec<RequestSpec> = reqs.iter().map(|(s, _)| s.clone()).collect();
        let mut w = WorkloadState::new(graph, &[model()], &specs).unwrap();
        for (spec, out) in reqs {
            w.set_raw_output_length(&spec.id, *out).unwrap();
        }
        w.resolve_roots().unwrap();
        w
    }

    fn cfg(max_seqs: u64, kv: u64) -> EngineConfig {
        EngineConfig {
            max_num_seqs: max_seqs,
            kv_capacity_tokens: kv,
        }
    }

    #[test]
    fn two_requests_prefill_then_decode() {
        // Both prompts admitted at t=0 into one prefill; the shorter request
        // finishes with its first token, the other decodes once more.
        let graph = one_node_graph();
        let mut w = workload_with(&graph, &[(request("a", 3, 2), 2), (request("b", 2, 1), 1)]);
        let result = simulate_model(
            &model(),
            ExecutionPlan::new(1, 1),
            "n",
            &mut w,
            &graph,
            &unit_table(),
            &cfg(2, 1_000),
            &SimOptions::default(),
        )
        .unwrap();
        assert_eq!(result.iterations.len(), 2);
        let p = &result.iterations[0];
        assert_eq!(p.descriptor.kind, IterationKind::Prefill);
        assert_eq!(p.descriptor.batch, 2);
        assert_eq!(p.descriptor.max_len, 3);
        assert_eq!(p.descriptor.total_len, 5);
        let d = &result.iterations[1];
        assert_eq!(d.descriptor.kind, IterationKind::Decode);
        assert_eq!(d.descriptor.batch, 1);
        assert_eq!(result.finish_times["b"], 1.0);
        assert_eq!(result.finish_times["a"], 2.0);
        assert_eq!(result.completion, Some(2.0));
        assert_eq!(result.total_time, 2.0);
    }

    #[test]
    fn single_slot_engine_serializes_fcfs() {
        let graph = one_node_graph();
        let mut w = workload_with(
            &graph,
            &[(request("a", 1, 2), 2), (request("b", 1, 2), 2), (request("c", 1, 2), 2)],
        );
        let result = simulate_model(
            &model(),
            ExecutionPlan::new(1, 1),
            "n",
            &mut w,
            &graph,
            &unit_table(),
            &cfg(1, 1_000),
            &SimOptions::default(),
        )
        .unwrap();
        // prefill a, decode a, prefill b, decode b, prefill c, decode c.
        assert_eq!(result.iterations.len(), 6);
        assert_eq!(result.finish_times["a"], 2.0);
        assert_eq!(result.finish_times["b"], 4.0);
        assert_eq!(result.finish_times["c"], 6.0);
    }

    #[test]
    fn kv_exhaustion_preempts_the_most_recent_request() {
        // Capacity 12. Prefill a+b -> kv = (4+1)+(4+1) = 10; first decode
        // fits (12); the second would need 14, so b is preempted, re-prefilled
        // later with its prompt plus the 2 generated tokens.
        let graph = one_node_graph();
        let mut w = workload_with(&graph, &[(request("a", 4, 4), 4), (request("b", 4, 4), 4)]);
        let result = simulate_model(
            &model(),
            ExecutionPlan::new(1, 1),
            "n",
            &mut w,
            &graph,
            &unit_table(),
            &cfg(2, 12),
            &SimOptions::default(),
        )
        .unwrap();
        let kinds: Vec<(IterationKind, u64)> = result
            .iterations
            .iter()
            .map(|it| (it.descriptor.kind, it.descriptor.batch))
            .collect();
        assert_eq!(
            kinds,
            vec![
                (IterationKind::Prefill, 2),
                (IterationKind::Decode, 2),
                (IterationKind::Decode, 1), // b preempted, a decodes alone
                (IterationKind::Decode, 1), // a finishes
                (IterationKind::Prefill, 1), // b re-prefilled (prompt 4+2=6)
                (IterationKind::Decode, 1),
            ]
        );
        // The re-prefill processes the prompt plus the generated prefix.
        assert_eq!(result.iterations[4].descriptor.max_len, 6);
        // KV stays within capacity throughout.
        assert!(result.iterations.iter().all(|it| it.kv_used <= 12));
        assert_eq!(result.finish_times["a"], 4.0);
        assert_eq!(result.finish_times["b"], 6.0);
    }

    #[test]
    fn replicas_split_arrivals_round_robin_and_idle_gaps_advance_the_clock() {
        let graph = one_node_graph();
        let mut spec_late = request("late", 1, 1);
        spec_late.base_input_len = 1;
        let mut w = workload_with(
            &graph,
            &[(request("a", 1, 1), 1), (request("b", 1, 1), 1), (spec_late, 1)],
        );
        // Delay the third request by faking its ready time after resolve.
        let idx = w.index_of("late").unwrap();
        w.request_mut(idx).ready_time = Some(5.0);
        let result = simulate_model(
            &model(),
            ExecutionPlan::new(2, 1),
            "n",
            &mut w,
            &graph,
            &unit_table(),
            &cfg(8, 1_000),
            &SimOptions::default(),
        )
        .unwrap();
        // a -> replica 0, b -> replica 1, late -> replica 0 after idling.
        assert_eq!(result.finish_times["a"], 1.0);
        assert_eq!(result.finish_times["b"], 1.0);
        assert_eq!(result.finish_times["late"], 6.0);
        let late_iter = result.iterations.iter().find(|it| it.start == 5.0).unwrap();
        assert_eq!(late_iter.replica, 0);
    }

    #[test]
    fn empty_workload_returns_zero() {
        let graph = one_node_graph();
        let mut w = workload_with(&graph, &[]);
        let result = simulate_model(
            &model(),
            ExecutionPlan::new(1, 1),
            "n",
            &mut w,
            &graph,
            &unit_table(),
            &cfg(1, 100),
            &SimOptions::default(),
        )
        .unwrap();
        assert_eq!(result.total_time, 0.0);
        assert!(result.iterations.is_empty());
        assert_eq!(result.completion, Some(0.0));
    }

    #[test]
    fn truncate_then_resume_equals_straight_through() {
        let graph = one_node_graph();
        let make = || {
            workload_with(
                &graph,
                &[
                    (request("a", 3, 5), 5),
                    (request("b", 2, 3), 3),
                    (request("c", 4, 4), 4),
                ],
            )
        };
        let m = model();
        let table = unit_table();
        let engine = cfg(2, 14);
        let plan = ExecutionPlan::new(1, 1);

        let mut w_full = make();
        let full = simulate_model(&m, plan, "n", &mut w_full, &graph, &table, &engine, &SimOptions::default()).unwrap();

        for cut in full.iterations.iter().map(|it| it.start + it.latency) {
            let mut w = make();
            let first = simulate_model(
                &m,
                plan,
                "n",
                &mut w,
                &graph,
                &table,
                &engine,
                &SimOptions {
                    time_limit: Some(cut),
                    ..Default::default()
                },
            )
            .unwrap();
            let second = simulate_model(
                &m,
                plan,
                "n",
                &mut w,
                &graph,
                &table,
                &engine,
                &SimOptions {
                    carry: Some(first.end_state.clone()),
                    ..Default::default()
                },
            )
            .unwrap();
            let mut merged = first.iterations.clone();
            merged.extend(second.iterations.clone());
            assert_eq!(merged, full.iterations, "cut at {}", cut);
            assert_eq!(second.completion, full.completion, "cut at {}", cut);
            assert_eq!(w, w_full, "cut at {}", cut);
        }
    }

    #[test]
    fn chain_successors_spawn_mid_simulation() {
        // Two chains of two chunks on one node; successors appear when their
        // predecessor finishes, with derived prompt lengths.
        let graph = AppGraph {
            nodes: vec![AppNode {
                id: "n".into(),
                model_id: "m".into(),
                max_output_tokens: None,
            }],
            edges: vec![AppEdge {
                src: "n".into(),
                dst: "n".into(),
                mode: EdgeMode::Concat,
                overhead_tokens: 1,
            }],
            chain_overhead: Default::default(),
        }
        .fuse_self_loops()
        .unwrap();
        let mk = |id: &str, preds: &[&str]| RequestSpec {
            id: id.into(),
            node_id: "n".into(),
            base_input_len: 4,
            predecessors: preds
                .iter()
                .map(|p| Predecessor {
                    request_id: (*p).to_string(),
                    transfer: LengthTransfer::AddOutputLen,
                })
                .collect(),
            ready: false,
        };
        let specs = vec![mk("c1", &[]), mk("d1", &[]), mk("c2", &["c1"]), mk("d2", &["d1"])];
        let mut w = WorkloadState::new(&graph, &[model()], &specs).unwrap();
        for id in ["c1", "d1", "c2", "d2"] {
            w.set_raw_output_length(id, 2).unwrap();
        }
        w.resolve_roots().unwrap();
        let result = simulate_model(
            &model(),
            ExecutionPlan::new(1, 1),
            "n",
            &mut w,
            &graph,
            &unit_table(),
            &cfg(4, 1_000),
            &SimOptions::default(),
        )
        .unwrap();
        // Successor prompt = 4 base + 2 output + 1 chain overhead = 7.
        assert_eq!(w.request_by_id("c2").unwrap().input_len, Some(7));
        assert_eq!(w.request_by_id("d2").unwrap().input_len, Some(7));
        assert!(result.completion.is_some());
        // Token conservation: prefill admissions + decode batch sizes equal
        // the total output tokens.
        let tokens: u64 = result
            .iterations
            .iter()
            .map(|it| match it.descriptor.kind {
                IterationKind::Prefill => it.descriptor.batch,
                IterationKind::Decode => it.descriptor.batch,
            })
            .sum();
        assert_eq!(tokens, 8);
    }

    #[test]
    fn stage_ends_at_the_earliest_completion() {
        let graph = AppGraph {
            nodes: vec![
                AppNode { id: "n".into(), model_id: "m".into(), max_output_tokens: None },
                AppNode { id: "p".into(), model_id: "m".into(), max_output_tokens: None },
            ],
            edges: vec![],
            chain_overhead: Default::default(),
        };
        let mut fast = request("fast", 1, 2);
        fast.node_id = "n".into();
        let mut slow = request("slow", 1, 6);
        slow.node_id = "p".into();
        let specs = vec![fast, slow];
        let mut w = WorkloadState::new(&graph, &[model()], &specs).unwrap();
        w.set_raw_output_length("fast", 2).unwrap();
        w.set_raw_output_length("slow", 6).unwrap();
        w.resolve_roots().unwrap();

        let models: BTreeMap<String, ModelSpec> = [("m".to_string(), model())].into();
        let entries = vec![
            StageEntrySim {
                node_id: "n".into(),
                model_id: "m".into(),
                plan: ExecutionPlan::new(1, 1),
                replica_offsets: vec![0.0],
                carry: None,
                engine: cfg(4, 1_000),
            },
            StageEntrySim {
                node_id: "p".into(),
                model_id: "m".into(),
                plan: ExecutionPlan::new(1, 1),
                replica_offsets: vec![0.0],
                carry: None,
                engine: cfg(4, 1_000),
            },
        ];
        let outcome = simulate_stage(&entries, &mut w, &graph, &models, &unit_table(), 0.0, None).unwrap();
        assert_eq!(outcome.end_time, 2.0);
        assert_eq!(outcome.first_finisher.as_deref(), Some("n"));
        assert_eq!(outcome.completions["p"], 6.0);
        // The slow model carries partial progress (2 of 6 tokens).
        let slow_req = w.request_by_id("slow").unwrap();
        assert_eq!(slow_req.generated, 2);
        assert!(!slow_req.finished);
    }
}
