//! Replays a plan against ground-truth output lengths.
//!
//! The planner predicted each stage from sampled lengths; at run time the
//! actual lengths differ, so models finish in a different order. The replay
//! walks the planned stages, simulating with the true ("oracle") lengths,
//! and reacts at every model-finish event:
//!
//! * a correctly predicted transition replays the plan as written: models
//!   planned into the next stage under the same plan continue in place, the
//!   rest pause and resume at their later planned stage;
//! * an unfinished model with no later planned appearance keeps running
//!   until done — the plan expected it to be finished by now, so stopping it
//!   would orphan it;
//! * on a mispredicted finish order, any other unfinished model keeps its
//!   GPUs only if the next stage's new entries leave them untouched;
//!   otherwise it stops and resumes at its later planned stage.
//!
//! New entries that do not fit while keepers hold their GPUs are deferred in
//! a first-come no-skip queue: a stage's entries never start before every
//! entry of the previous stage is scheduled or its model has finished. Once
//! the planned stages are exhausted, drain entries are synthesized for any
//! stranded models so the application always completes. The result is a
//! timeline of events, per-GPU occupancy segments and an idle-time report.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::catalog::{enumerate_valid_plans, ExecutionPlan, GpuTopology, ModelSpec};
use crate::cost::CostTable;
use crate::error::{Error, Result};
use crate::graph::AppGraph;
use crate::placement::{place_stage_pinned, Occupant, PlacementRequest, PlacementState, ResidentModel};
use crate::planner::AppPlan;
use crate::sim::{simulate_stage, EngineConfig, EngineSnapshot, IterationRecord, StageEntrySim};
use crate::workload::{RequestSpec, WorkloadState};

/// True output length per request id.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OracleWorkload(pub BTreeMap<String, u64>);

impl OracleWorkload {
    pub fn get(&self, request_id: &str) -> Option<u64> {
        self.0.get(request_id).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    ModelStarted,
    ModelFinished,
    StageAdvanced,
    ModelKeptRunning,
    ModelStopped,
    PlacementMoved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeEvent {
    pub time: f64,
    pub kind: EventKind,
    /// Affected model; `None` for stage-level events.
    pub node_id: Option<String>,
    pub detail: String,
}

/// One model's tenure on one GPU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuSegment {
    pub gpu: usize,
    pub start: f64,
    pub end: f64,
    pub node_id: String,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdleReport {
    /// Idle seconds per GPU over `[0, span]`.
    pub per_gpu: Vec<f64>,
    pub total_idle: f64,
    pub span: f64,
}

/// GPU assignment in force from `time` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementSnapshot {
    pub time: f64,
    pub occupants: Vec<Option<Occupant>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeTrace {
    pub events: Vec<RuntimeEvent>,
    pub segments: Vec<GpuSegment>,
    pub placements: Vec<PlacementSnapshot>,
    /// Measured (simulated-with-oracle) end-to-end seconds.
    pub total_time: f64,
    /// The planner's predicted end-to-end seconds, for the error ratio.
    pub planned_total: f64,
    pub finished_requests: u64,
    /// Committed iterations per node, in execution order.
    pub iterations: BTreeMap<String, Vec<IterationRecord>>,
    pub idle: IdleReport,
}

impl RuntimeTrace {
    /// |measured − planned| / measured; 0 when the prediction was exact.
    pub fn error_ratio(&self) -> f64 {
        if self.total_time > 0.0 {
            (self.total_time - self.planned_total).abs() / self.total_time
        } else {
            0.0
        }
    }
}

/// All `size`-element subsets of `items`, in lexicographic order.
fn combinations(items: &[String], size: usize) -> Vec<Vec<String>> {
    if size == 0 {
        return vec![Vec::new()];
    }
    if items.len() < size {
        return Vec::new();
    }
    let mut out = Vec::new();
    for (i, first) in items.iter().enumerate() {
        for mut rest in combinations(&items[i + 1..], size - 1) {
            rest.insert(0, first.clone());
            out.push(rest);
        }
    }
    out
}

/// Per-GPU idle seconds derived from occupancy segments.
pub fn gpu_idle_report(segments: &[GpuSegment], num_gpus: usize, span: f64) -> IdleReport {
    let mut busy = vec![0.0f64; num_gpus];
    for seg in segments {
        busy[seg.gpu] += seg.end - seg.start;
    }
    let per_gpu: Vec<f64> = busy.iter().map(|b| (span - b).max(0.0)).collect();
    IdleReport {
        total_idle: per_gpu.iter().sum(),
        per_gpu,
        span,
    }
}

/// A model currently running on the node.
struct ActiveEntry {
    node_id: String,
    model_id: String,
    plan: ExecutionPlan,
    engine: EngineConfig,
    carry: Option<EngineSnapshot>,
    offsets: Vec<f64>,
    /// Sorted GPU ids per replica.
    gpus: Vec<Vec<usize>>,
    /// When the model was scheduled (loading included in occupancy).
    activated: f64,
    /// The planned stage this entry belongs to; `None` for keepers and
    /// drain entries, whose finish does not end a stage.
    member: Option<usize>,
}

impl ActiveEntry {
    fn to_sim(&self) -> StageEntrySim {
        StageEntrySim {
            node_id: self.node_id.clone(),
            model_id: self.model_id.clone(),
            plan: self.plan,
            replica_offsets: self.offsets.clone(),
            carry: self.carry.clone(),
            engine: self.engine,
        }
    }

    fn all_gpus(&self) -> Vec<usize> {
        self.gpus.iter().flatten().copied().collect()
    }
}

/// A scheduled-but-not-yet-started model, waiting for GPUs.
struct PendingEntry {
    /// Planned stage it came from; `None` for drain entries.
    stage: Option<usize>,
    node_id: String,
    model_id: String,
    plan: ExecutionPlan,
}

struct Replay<'a> {
    plan: &'a AppPlan,
    graph: &'a AppGraph,
    models: &'a BTreeMap<String, ModelSpec>,
    topo: &'a GpuTopology,
    table: &'a CostTable,
    workload: WorkloadState,
    active: Vec<ActiveEntry>,
    pending: VecDeque<PendingEntry>,
    /// Mispredicted-transition candidates whose GPUs are up for grabs while
    /// the next stage's entries are placed.
    ghosts: BTreeSet<String>,
    /// Next planned stage to open.
    cursor: usize,
    /// Planned stage whose first member completion ends it.
    in_flight: Option<usize>,
    clock: f64,
    events: Vec<RuntimeEvent>,
    segments: Vec<GpuSegment>,
    placements: Vec<PlacementSnapshot>,
    iterations: BTreeMap<String, Vec<IterationRecord>>,
}

impl<'a> Replay<'a> {
    fn event(&mut self, kind: EventKind, node: Option<&str>, detail: String) {
        self.events.push(RuntimeEvent {
            time: self.clock,
            kind,
            node_id: node.map(str::to_string),
            detail,
        });
    }

    fn model_spec(&self, node_id: &str) -> Result<&'a ModelSpec> {
        let node = self
            .graph
            .node(node_id)
            .ok_or_else(|| Error::Mismatch(format!("plan names unknown node '{}'", node_id)))?;
        self.models.get(&node.model_id).ok_or_else(|| {
            Error::Mismatch(format!("node '{}' uses unknown model '{}'", node_id, node.model_id))
        })
    }

    /// Closes an active entry's occupancy at the current clock.
    fn release(&mut self, node_id: &str) -> ActiveEntry {
        let idx = self
            .active
            .iter()
            .position(|e| e.node_id == node_id)
            .expect("released entry is active");
        let entry = self.active.remove(idx);
        self.ghosts.remove(node_id);
        for g in entry.all_gpus() {
            self.segments.push(GpuSegment {
                gpu: g,
                start: entry.activated,
                end: self.clock,
                node_id: entry.node_id.clone(),
                model_id: entry.model_id.clone(),
            });
        }
        entry
    }

    /// Placement context for starting a queued entry: every running model
    /// (minus `exclude`) stays resident. Entries of the stage in flight are
    /// pinned in place; keepers are requested unpinned, so the search may
    /// relocate them (charged a reload) when that is the cheapest way to fit
    /// the newcomer.
    fn placement_context(
        &self,
        exclude: &BTreeSet<String>,
    ) -> (PlacementState, BTreeSet<String>, Vec<PlacementRequest>) {
        let mut state = PlacementState::empty(self.topo.num_gpus);
        let mut pins = BTreeSet::new();
        let mut requests = Vec::new();
        for e in &self.active {
            if exclude.contains(&e.node_id) {
                continue;
            }
            state.resident.insert(
                e.node_id.clone(),
                ResidentModel {
                    model_id: e.model_id.clone(),
                    plan: e.plan,
                    replica_gpus: e.gpus.clone(),
                },
            );
            for (replica, gpus) in e.gpus.iter().enumerate() {
                for (rank, &g) in gpus.iter().enumerate() {
                    state.occupants[g] = Some(Occupant {
                        node_id: e.node_id.clone(),
                        model_id: e.model_id.clone(),
                        replica,
                        rank,
                    });
                }
            }
            if e.member.is_some() && !self.ghosts.contains(&e.node_id) {
                pins.insert(e.node_id.clone());
            }
            requests.push(PlacementRequest {
                node_id: e.node_id.clone(),
                model_id: e.model_id.clone(),
                plan: e.plan,
            });
        }
        (state, pins, requests)
    }

    /// Running models that may be stopped to make room: they appear in a
    /// later planned stage, so the plan resumes them. Models in their last
    /// planned stage are never stopped — nothing would restart them.
    fn stoppable_nodes(&self) -> Vec<String> {
        self.active
            .iter()
            .filter(|e| {
                self.ghosts.contains(&e.node_id)
                    || (e.member.is_none() && self.appears_later(&e.node_id, self.cursor))
            })
            .map(|e| e.node_id.clone())
            .collect()
    }

    fn snapshot_placement(&mut self) {
        let mut state = PlacementState::empty(self.topo.num_gpus);
        for e in &self.active {
            for (replica, gpus) in e.gpus.iter().enumerate() {
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
        self.placements.push(PlacementSnapshot {
            time: self.clock,
            occupants: state.occupants,
        });
    }

    /// Does any stage from `from` onward plan this node?
    fn appears_later(&self, node_id: &str, from: usize) -> bool {
        self.plan.stages[from.min(self.plan.stages.len())..]
            .iter()
            .any(|s| s.entries.iter().any(|e| e.node_id == node_id))
    }

    /// Most recent plan the document assigns to this node, if any.
    fn last_planned_plan(&self, node_id: &str) -> Option<ExecutionPlan> {
        self.plan
            .stages
            .iter()
            .rev()
            .flat_map(|s| s.entries.iter())
            .find(|e| e.node_id == node_id)
            .map(|e| e.plan)
    }

    /// Places the queue head alongside everything running. Falls back to
    /// stopping the smallest lexicographic set of stoppable models when that
    /// is the only way to fit; returns `None` when even that fails.
    fn attempt_head(&mut self, head: &PlacementRequest) -> Result<Option<crate::placement::PlacementOutcome>> {
        let no_stops = BTreeSet::new();
        let (prev, pins, mut requests) = self.placement_context(&no_stops);
        requests.push(head.clone());
        match place_stage_pinned(&prev, &requests, &pins, self.topo, self.table) {
            Ok(outcome) => return Ok(Some(outcome)),
            Err(Error::Infeasible(_)) => {}
            Err(e) => return Err(e),
        }
        let stoppable = self.stoppable_nodes();
        for size in 1..=stoppable.len() {
            for drop in combinations(&stoppable, size) {
                let drop: BTreeSet<String> = drop.into_iter().collect();
                let (prev, pins, mut requests) = self.placement_context(&drop);
                requests.push(head.clone());
                match place_stage_pinned(&prev, &requests, &pins, self.topo, self.table) {
                    Ok(outcome) => {
                        for node in &drop {
                            self.release(node);
                            self.event(
                                EventKind::ModelStopped,
                                Some(node),
                                "GPUs taken by the next stage; resumes at its later planned stage"
                                    .into(),
                            );
                        }
                        return Ok(Some(outcome));
                    }
                    Err(Error::Infeasible(_)) => continue,
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(None)
    }

    /// Applies relocations the placement decided on: a moved model reloads
    /// its weights on the new GPUs (engine restarts there, progress kept).
    fn apply_moves(&mut self, outcome: &crate::placement::PlacementOutcome) -> Result<()> {
        let moved: BTreeSet<String> = outcome.moves.iter().map(|m| m.node_id.clone()).collect();
        for mv in &outcome.moves {
            self.event(
                EventKind::PlacementMoved,
                Some(&mv.node_id),
                format!("replica {} moved {:?} -> {:?}", mv.replica, mv.from, mv.to),
            );
        }
        for node in moved {
            let new_gpus = outcome.state.resident[&node].replica_gpus.clone();
            let load = {
                let entry = self
                    .active
                    .iter()
                    .find(|e| e.node_id == node)
                    .expect("moved entry is active");
                self.table.loading_time(&entry.model_id, entry.plan)?
            };
            let clock = self.clock;
            let entry_idx = self
                .active
                .iter()
                .position(|e| e.node_id == node)
                .expect("moved entry is active");
            // Close the tenure on the old GPUs before restarting.
            let old = {
                let e = &self.active[entry_idx];
                (e.all_gpus(), e.activated, e.node_id.clone(), e.model_id.clone())
            };
            for g in old.0 {
                self.segments.push(GpuSegment {
                    gpu: g,
                    start: old.1,
                    end: clock,
                    node_id: old.2.clone(),
                    model_id: old.3.clone(),
                });
            }
            let e = &mut self.active[entry_idx];
            e.gpus = new_gpus;
            e.activated = clock;
            e.carry = None;
            e.offsets = vec![clock + load; e.plan.dp as usize];
        }
        Ok(())
    }

    /// Starts queued entries first-come, no-skip: the head either fits (with
    /// keepers relocated or, as a last resort, stopped) or everything waits.
    fn try_start_pending(&mut self) -> Result<()> {
        loop {
            let Some(front) = self.pending.front() else { break };
            if self.workload.node_is_finished(&front.node_id) {
                let node = front.node_id.clone();
                self.pending.pop_front();
                self.event(
                    EventKind::ModelFinished,
                    Some(&node),
                    "finished before starting (instant requests)".into(),
                );
                continue;
            }
            let head = PlacementRequest {
                node_id: front.node_id.clone(),
                model_id: front.model_id.clone(),
                plan: front.plan,
            };
            let Some(outcome) = self.attempt_head(&head)? else { break };
            self.apply_moves(&outcome)?;
            let entry = self.pending.pop_front().expect("head exists");
            let spec = self.model_spec(&entry.node_id)?;
            let engine = EngineConfig::derive(spec, entry.plan, self.topo, self.plan.max_num_seqs)?;
            let load = self.table.loading_time(&entry.model_id, entry.plan)?;
            let gpus = outcome.state.resident[&entry.node_id].replica_gpus.clone();
            self.event(
                EventKind::ModelStarted,
                Some(&entry.node_id),
                format!("{} loading {:.3}s on GPUs {:?}", entry.plan, load, gpus),
            );
            self.active.push(ActiveEntry {
                node_id: entry.node_id,
                model_id: entry.model_id,
                plan: entry.plan,
                engine,
                carry: None,
                offsets: vec![self.clock + load; entry.plan.dp as usize],
                gpus,
                activated: self.clock,
                member: entry.stage,
            });
            self.active.sort_by(|a, b| a.node_id.cmp(&b.node_id));
        }
        Ok(())
    }

    /// Opens the next planned stage, applying the adjustment rules to the
    /// still-running models; past the last stage, falls through to drain.
    fn transition(&mut self, mispredicted: bool) -> Result<()> {
        // Skip planned stages whose models all finished already.
        while self.cursor < self.plan.stages.len()
            && self.plan.stages[self.cursor]
                .entries
                .iter()
                .all(|e| self.workload.node_is_finished(&e.node_id))
        {
            self.event(
                EventKind::StageAdvanced,
                None,
                format!("stage {} skipped: all models already finished", self.cursor),
            );
            self.cursor += 1;
        }
        if self.cursor >= self.plan.stages.len() {
            self.in_flight = None;
            let mut overruns: Vec<String> = Vec::new();
            for e in &mut self.active {
                if e.member.take().is_some() {
                    overruns.push(e.node_id.clone());
                }
            }
            for node in overruns {
                self.event(
                    EventKind::ModelKeptRunning,
                    Some(&node),
                    "plan exhausted; runs until finished".into(),
                );
            }
            self.try_start_pending()?;
            return self.top_up();
        }

        let stage_idx = self.cursor;
        let planned: Vec<(String, String, ExecutionPlan)> = self.plan.stages[stage_idx]
            .entries
            .iter()
            .filter(|e| !self.workload.node_is_finished(&e.node_id))
            .map(|e| (e.node_id.clone(), e.model_id.clone(), e.plan))
            .collect();

        // Classify the still-running models.
        let mut carried: BTreeSet<String> = BTreeSet::new();
        let mut keepers: Vec<String> = Vec::new(); // no later appearance
        let mut ghosts: Vec<String> = Vec::new(); // keep iff GPUs remain
        let mut stops: Vec<(String, &'static str)> = Vec::new();
        for e in &self.active {
            let was_member = e.member.is_some();
            if let Some((_, _, plan)) = planned.iter().find(|(n, _, _)| *n == e.node_id) {
                if *plan == e.plan {
                    carried.insert(e.node_id.clone()); // continues seamlessly
                } else {
                    stops.push((e.node_id.clone(), "re-planned for the next stage"));
                }
            } else if !self.appears_later(&e.node_id, stage_idx + 1) {
                keepers.push(e.node_id.clone());
            } else if !was_member {
                // An opportunistic keeper from an earlier misprediction: it
                // stays until its GPUs are needed or its planned stage comes.
            } else if mispredicted {
                ghosts.push(e.node_id.clone());
            } else {
                stops.push((e.node_id.clone(), "paused at the planned stage boundary"));
            }
        }
        for (node, why) in &stops {
            self.release(node);
            self.event(EventKind::ModelStopped, Some(node), (*why).into());
        }
        for node in &keepers {
            let e = self
                .active
                .iter_mut()
                .find(|e| &e.node_id == node)
                .expect("keeper is active");
            if e.member.take().is_some() {
                self.event(
                    EventKind::ModelKeptRunning,
                    Some(node),
                    "no later planned stage; runs until finished".into(),
                );
            }
        }
        self.ghosts = ghosts.iter().cloned().collect();

        // Members of the opened stage: carried entries renew membership, the
        // rest queue up behind earlier stages' unscheduled entries.
        for e in &mut self.active {
            if carried.contains(&e.node_id) {
                e.member = Some(stage_idx);
            }
        }
        for (node, model, plan) in &planned {
            if !carried.contains(node) {
                self.pending.push_back(PendingEntry {
                    stage: Some(stage_idx),
                    node_id: node.clone(),
                    model_id: model.clone(),
                    plan: *plan,
                });
            }
        }
        self.event(
            EventKind::StageAdvanced,
            None,
            if mispredicted {
                format!("stage {} opened after a mispredicted finish order", stage_idx)
            } else {
                format!("stage {} opened", stage_idx)
            },
        );
        self.in_flight = Some(stage_idx);
        self.cursor = stage_idx + 1;
        self.try_start_pending()?;

        // Ghosts that survived the stage's placements keep running as
        // opportunistic keepers until their GPUs are needed elsewhere.
        let survivors: Vec<String> = self.ghosts.iter().cloned().collect();
        self.ghosts.clear();
        for node in survivors {
            if let Some(entry) = self.active.iter_mut().find(|e| e.node_id == node) {
                entry.member = None;
                self.event(
                    EventKind::ModelKeptRunning,
                    Some(&node),
                    "keeps running beside the next stage".into(),
                );
            }
        }
        self.snapshot_placement();
        Ok(())
    }

    /// Once the plan is exhausted, queues every ready stranded model (FCFS
    /// by node id) under its last planned execution plan.
    fn top_up(&mut self) -> Result<()> {
        if self.in_flight.is_some() || !self.pending.is_empty() {
            return Ok(());
        }
        let finished: BTreeSet<String> = self
            .graph
            .nodes
            .iter()
            .filter(|n| self.workload.node_is_finished(&n.id))
            .map(|n| n.id.clone())
            .collect();
        let running: BTreeSet<String> = self.active.iter().map(|e| e.node_id.clone()).collect();
        let mut ready: Vec<String> = crate::graph::ready_models(self.graph, &finished, &running)
            .into_iter()
            .filter(|n| !running.contains(n))
            .collect();
        ready.sort();
        if ready.is_empty() {
            if self.active.is_empty() && !self.workload.all_finished() {
                return Err(Error::Infeasible(
                    "planned stages exhausted with unfinished models that can never become ready"
                        .into(),
                ));
            }
            return Ok(());
        }
        for node in ready {
            let spec = self.model_spec(&node)?;
            let plan = self
                .last_planned_plan(&node)
                .or_else(|| enumerate_valid_plans(spec, self.topo).into_iter().next())
                .ok_or_else(|| {
                    Error::Infeasible(format!("model '{}' has no valid execution plan", spec.id))
                })?;
            self.pending.push_back(PendingEntry {
                stage: None,
                node_id: node,
                model_id: spec.id.clone(),
                plan,
            });
        }
        self.event(EventKind::StageAdvanced, None, "drain: scheduling leftover models".into());
        self.try_start_pending()?;
        self.snapshot_placement();
        Ok(())
    }

    fn run(&mut self) -> Result<()> {
        self.transition(false)?;
        loop {
            if self.active.is_empty() {
                if self.pending.is_empty() {
                    break;
                }
                let head = self.pending.front().expect("pending non-empty");
                return Err(Error::Infeasible(format!(
                    "planned entry '{}' ({}) cannot be placed even on an idle node",
                    head.node_id, head.plan
                )));
            }

            let entries: Vec<StageEntrySim> = self.active.iter().map(ActiveEntry::to_sim).collect();
            let outcome = simulate_stage(
                &entries,
                &mut self.workload,
                self.graph,
                self.models,
                self.table,
                self.clock,
                None,
            )?;
            self.clock = outcome.end_time;
            for (node, result) in &outcome.results {
                self.iterations
                    .entry(node.clone())
                    .or_default()
                    .extend(result.iterations.iter().cloned());
                let entry = self
                    .active
                    .iter_mut()
                    .find(|e| &e.node_id == node)
                    .expect("result for active entry");
                entry.carry = Some(result.end_state.clone());
            }

            // Release finished models. `active` is sorted by node id, so the
            // first member finisher is the lowest id, matching the planner's
            // tie rule.
            let mut enders: Vec<String> = Vec::new();
            let finished_active: Vec<(String, Option<usize>)> = self
                .active
                .iter()
                .filter(|e| self.workload.node_is_finished(&e.node_id))
                .map(|e| (e.node_id.clone(), e.member))
                .collect();
            for (node, member) in &finished_active {
                self.release(node);
                self.event(EventKind::ModelFinished, Some(node), String::new());
                if *member == self.in_flight && member.is_some() {
                    enders.push(node.clone());
                }
            }
            // Queued entries can finish without running when zero-length
            // requests cascade through another model's simulation.
            let mut queued_done: Vec<(String, Option<usize>)> = Vec::new();
            let workload = &self.workload;
            self.pending.retain(|p| {
                if workload.node_is_finished(&p.node_id) {
                    queued_done.push((p.node_id.clone(), p.stage));
                    false
                } else {
                    true
                }
            });
            for (node, stage) in &queued_done {
                self.event(
                    EventKind::ModelFinished,
                    Some(node),
                    "finished without running (zero-length requests)".into(),
                );
                if *stage == self.in_flight && stage.is_some() {
                    enders.push(node.clone());
                }
            }
            if finished_active.is_empty() && queued_done.is_empty() {
                return Err(Error::Mismatch(
                    "internal: simulation made no progress (no model finished)".into(),
                ));
            }

            if let (Some(stage_idx), Some(first)) = (self.in_flight, enders.iter().min()) {
                let planned_first = self.plan.stages[stage_idx].planned_first_finisher.clone();
                let mispredicted = planned_first.as_deref() != Some(first.as_str());
                if mispredicted {
                    let first = first.clone();
                    self.event(
                        EventKind::StageAdvanced,
                        Some(&first),
                        format!(
                            "stage {} ended by '{}' (planned '{}')",
                            stage_idx,
                            first,
                            planned_first.as_deref().unwrap_or("-")
                        ),
                    );
                }
                self.in_flight = None;
                self.transition(mispredicted)?;
            } else {
                // Keeper or drain finishes: free GPUs may unblock the queue,
                // and an exhausted plan tops up with stranded models.
                self.try_start_pending()?;
                if self.in_flight.is_none() {
                    self.top_up()?;
                }
            }
        }
        if !self.workload.all_finished() {
            return Err(Error::Mismatch(
                "internal: replay ended with unfinished requests".into(),
            ));
        }
        Ok(())
    }
}

/// Replays `plan` with the oracle's true lengths, applying the dynamic
/// adjustment rules at every finish event.
pub fn run_with_oracle(
    plan: &AppPlan,
    graph: &AppGraph,
    models: &BTreeMap<String, ModelSpec>,
    topo: &GpuTopology,
    table: &CostTable,
    specs: &[RequestSpec],
    oracle: &OracleWorkload,
) -> Result<RuntimeTrace> {
    for stage in &plan.stages {
        for e in &stage.entries {
            if graph.node(&e.node_id).is_none() {
                return Err(Error::Mismatch(format!(
                    "plan/graph mismatch: plan schedules unknown node '{}'",
                    e.node_id
                )));
            }
        }
    }
    let model_list: Vec<ModelSpec> = models.values().cloned().collect();
    let mut workload = WorkloadState::new(graph, &model_list, specs)?;
    for spec in specs {
        let len = oracle.get(&spec.id).ok_or_else(|| {
            Error::Mismatch(format!("oracle has no output length for request '{}'", spec.id))
        })?;
        workload.set_raw_output_length(&spec.id, len)?;
    }
    workload.resolve_roots()?;

    let mut replay = Replay {
        plan,
        graph,
        models,
        topo,
        table,
        workload,
        active: Vec::new(),
        pending: VecDeque::new(),
        ghosts: BTreeSet::new(),
        cursor: 0,
        in_flight: None,
        clock: 0.0,
        events: Vec::new(),
        segments: Vec::new(),
        placements: Vec::new(),
        iterations: BTreeMap::new(),
    };
    replay.run()?;

    let total_time = replay.clock;
    let idle = gpu_idle_report(&replay.segments, topo.num_gpus, total_time);
    let finished_requests = replay.workload.iter().filter(|r| r.finished).count() as u64;
    Ok(RuntimeTrace {
        events: replay.events,
        segments: replay.segments,
        placements: replay.placements,
        total_time,
        planned_total: plan.total_latency,
        finished_requests,
        iterations: replay.iterations,
        idle,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::PhaseKind;
    use crate::graph::AppNode;
    use crate::planner::{greedy_search, PlannerInputs, PlannerOptions, Stage, StageEntry};

    /// Independent single-request models, one second per token on one GPU,
    /// half a second at tp2; loading is free.
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
                table.set_loading(&id, ExecutionPlan::new(dp, 1), 0.0);
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

    fn specs(outputs: &[u64]) -> Vec<RequestSpec> {
        (0..outputs.len())
            .map(|i| RequestSpec {
                id: format!("r{}", i),
                node_id: format!("n{}", i),
                base_input_len: 1,
                predecessors: vec![],
                ready: true,
            })
            .collect()
    }

    fn workload_from(
        graph: &AppGraph,
        models: &BTreeMap<String, ModelSpec>,
        reqs: &[RequestSpec],
        outputs: &[u64],
    ) -> WorkloadState {
        let all: Vec<ModelSpec> = models.values().cloned().collect();
        let mut w = WorkloadState::new(graph, &all, reqs).unwrap();
        for (i, out) in outputs.iter().enumerate() {
            w.set_raw_output_length(&format!("r{}", i), *out).unwrap();
        }
        w.resolve_roots().unwrap();
        w
    }

    fn oracle(outputs: &[u64]) -> OracleWorkload {
        OracleWorkload(
            outputs
                .iter()
                .enumerate()
                .map(|(i, &o)| (format!("r{}", i), o))
                .collect(),
        )
    }

    fn entry(node: usize, dp: u64, tp: u64) -> StageEntry {
        StageEntry {
            node_id: format!("n{}", node),
            model_id: format!("m{}", node),
            plan: ExecutionPlan::new(dp, tp),
            loading_seconds: 0.0,
            gpus: Vec::new(),
        }
    }

    fn stage(entries: Vec<StageEntry>, start: f64, end: f64, first: &str) -> Stage {
        let gpus_used = entries.iter().map(|e| e.plan.gpus_required()).sum();
        Stage {
            entries,
            start_time: start,
            end_time: end,
            duration: end - start,
            planned_first_finisher: Some(first.to_string()),
            gpus_used,
            flops: 0.0,
            throughput: 0.0,
            remaining_requests: 0,
        }
    }

    fn handcrafted(stages: Vec<Stage>, total: f64) -> AppPlan {
        AppPlan {
            algorithm: "handcrafted".into(),
            seed: 0,
            max_num_seqs: crate::sim::DEFAULT_MAX_NUM_SEQS,
            allow_preemption: true,
            stages,
            total_latency: total,
            candidate_evaluations: 0,
        }
    }

    #[test]
    fn exact_oracle_reproduces_the_planned_total() {
        let (graph, models, topo, table) = fixture(2, 2);
        let inputs = PlannerInputs { graph: &graph, models: &models, topo: &topo, table: &table };
        let outputs = [6, 8];
        let reqs = specs(&outputs);
        let w = workload_from(&graph, &models, &reqs, &outputs);
        let plan = greedy_search(&inputs, w, &PlannerOptions::default()).unwrap();
        let trace =
            run_with_oracle(&plan, &graph, &models, &topo, &table, &reqs, &oracle(&outputs))
                .unwrap();
        assert_eq!(trace.total_time, plan.total_latency);
        assert_eq!(trace.error_ratio(), 0.0);
        assert_eq!(trace.finished_requests, 2);
    }

    #[test]
    fn overrun_is_replanned_at_the_stage_boundary() {
        let (graph, models, topo, table) = fixture(2, 2);
        let inputs = PlannerInputs { graph: &graph, models: &models, topo: &topo, table: &table };
        let planned_out = [6, 8];
        let reqs = specs(&planned_out);
        let w = workload_from(&graph, &models, &reqs, &planned_out);
        let plan = greedy_search(&inputs, w, &PlannerOptions::default()).unwrap();
        // The planner re-plans n1 onto both GPUs once n0 is done. n1 actually
        // runs long (12 tokens instead of 8) but still switches to tp2 at the
        // boundary: 6 tokens remain at t=6, half a second each.
        let actual = [6, 12];
        let trace =
            run_with_oracle(&plan, &graph, &models, &topo, &table, &reqs, &oracle(&actual))
                .unwrap();
        assert_eq!(trace.finished_requests, 2);
        assert_eq!(trace.total_time, 9.0);
        assert!(trace
            .events
            .iter()
            .any(|e| e.kind == EventKind::ModelStopped && e.node_id.as_deref() == Some("n1")));
    }

    #[test]
    fn model_with_no_later_stage_runs_until_finished() {
        let (graph, models, topo, table) = fixture(2, 2);
        let inputs = PlannerInputs { graph: &graph, models: &models, topo: &topo, table: &table };
        let planned_out = [6, 8];
        let reqs = specs(&planned_out);
        let w = workload_from(&graph, &models, &reqs, &planned_out);
        let plan = greedy_search(&inputs, w, &PlannerOptions::default()).unwrap();
        // n1 finishes early (3 < 6): a mispredicted first finisher. n0 has no
        // later planned appearance, so it keeps its GPU until done at t=8.
        let actual = [8, 3];
        let trace =
            run_with_oracle(&plan, &graph, &models, &topo, &table, &reqs, &oracle(&actual))
                .unwrap();
        assert_eq!(trace.finished_requests, 2);
        assert_eq!(trace.total_time, 8.0);
        assert!(trace
            .events
            .iter()
            .any(|e| e.kind == EventKind::ModelKeptRunning && e.node_id.as_deref() == Some("n0")));
    }

    #[test]
    fn conflicting_keeper_is_relocated_not_stopped() {
        // Planned: {n0,n1,n2} on one GPU each, n0 first out; then n3 on a
        // whole NVLink pair with n1 carried; n2 pauses and resumes later.
        let (graph, models, topo, table) = fixture(4, 4);
        let plan = handcrafted(
            vec![
                stage(vec![entry(0, 1, 1), entry(1, 1, 1), entry(2, 1, 1)], 0.0, 4.0, "n0"),
                stage(vec![entry(1, 1, 1), entry(3, 1, 2)], 4.0, 6.0, "n1"),
                stage(vec![entry(2, 1, 1), entry(3, 1, 2)], 6.0, 8.0, "n3"),
                stage(vec![entry(2, 1, 1)], 8.0, 13.0, "n2"),
            ],
            13.0,
        );
        // Actually n1 finishes first at t=2. n3 needs a whole pair; with n0
        // keeping GPU 0 and n2 sitting on GPU 2, the cheapest placement
        // relocates n2 to GPU 1 (free reload here) and gives n3 the {2,3}
        // pair. n2 keeps running and is carried into its later stages.
        let actual = [4, 2, 9, 8];
        let reqs = specs(&actual);
        let trace =
            run_with_oracle(&plan, &graph, &models, &topo, &table, &reqs, &oracle(&actual))
                .unwrap();
        assert_eq!(trace.finished_requests, 4);
        assert!(!trace
            .events
            .iter()
            .any(|e| e.kind == EventKind::ModelStopped && e.node_id.as_deref() == Some("n2")));
        let moved = trace
            .events
            .iter()
            .find(|e| e.kind == EventKind::PlacementMoved && e.node_id.as_deref() == Some("n2"))
            .expect("n2 must be relocated");
        assert_eq!(moved.time, 2.0);
        assert!(trace
            .events
            .iter()
            .any(|e| e.kind == EventKind::ModelKeptRunning && e.node_id.as_deref() == Some("n0")));
        // n2 restarted its engine on GPU 1 at t=2 with 2 of 9 tokens done:
        // recompute prefill plus six decodes finishes it at t=9.
        assert_eq!(trace.total_time, 9.0);
    }

    #[test]
    fn keeper_is_stopped_when_the_stage_needs_every_gpu() {
        // Stage 1 wants all four GPUs. While n0 (last planned stage) keeps a
        // GPU the entry must wait; once n0 finishes, n2 — which has a later
        // planned stage to resume at — is stopped to free the node.
        let (graph, models, topo, table) = fixture(4, 4);
        let plan = handcrafted(
            vec![
                stage(vec![entry(0, 1, 1), entry(1, 1, 1), entry(2, 1, 1)], 0.0, 4.0, "n0"),
                stage(vec![entry(3, 2, 2)], 4.0, 8.0, "n1"),
                stage(vec![entry(2, 1, 1)], 8.0, 13.0, "n2"),
            ],
            13.0,
        );
        let actual = [4, 2, 9, 8];
        let reqs = specs(&actual);
        let trace =
            run_with_oracle(&plan, &graph, &models, &topo, &table, &reqs, &oracle(&actual))
                .unwrap();
        assert_eq!(trace.finished_requests, 4);
        let stopped = trace
            .events
            .iter()
            .find(|e| e.kind == EventKind::ModelStopped && e.node_id.as_deref() == Some("n2"))
            .expect("n2 must be stopped");
        assert_eq!(stopped.time, 4.0);
        assert!(stopped.detail.contains("resumes"));
        // n3 runs t=4..8 on the whole node. n2 kept computing beside stage 0
        // until the stop (4 of 9 tokens by t=4), so after restarting at t=8
        // it needs a recompute prefill plus four decodes: done at t=13.
        let restart = trace
            .events
            .iter()
            .filter(|e| e.kind == EventKind::ModelStarted && e.node_id.as_deref() == Some("n2"))
            .nth(1)
            .expect("n2 restarts");
        assert_eq!(restart.time, 8.0);
        assert_eq!(trace.total_time, 13.0);
    }

    #[test]
    fn blocked_stage_entry_waits_for_the_keeper() {
        // n1 has no later planned stage, so it keeps its GPU; n2 wants both
        // GPUs and must wait for n1 to finish at t=10 before starting.
        let (graph, models, topo, table) = fixture(3, 2);
        let plan = handcrafted(
            vec![
                stage(vec![entry(0, 1, 1), entry(1, 1, 1)], 0.0, 4.0, "n0"),
                stage(vec![entry(2, 1, 2)], 4.0, 7.0, "n2"),
            ],
            7.0,
        );
        let actual = [4, 10, 6];
        let reqs = specs(&actual);
        let trace =
            run_with_oracle(&plan, &graph, &models, &topo, &table, &reqs, &oracle(&actual))
                .unwrap();
        assert_eq!(trace.finished_requests, 3);
        assert!(trace
            .events
            .iter()
            .any(|e| e.kind == EventKind::ModelKeptRunning && e.node_id.as_deref() == Some("n1")));
        let started = trace
            .events
            .iter()
            .find(|e| e.kind == EventKind::ModelStarted && e.node_id.as_deref() == Some("n2"))
            .expect("n2 eventually starts");
        assert_eq!(started.time, 10.0);
        // 6 tokens at half a second each, starting at t=10.
        assert_eq!(trace.total_time, 13.0);
    }

    #[test]
    fn missing_oracle_entry_is_an_error() {
        let (graph, models, topo, table) = fixture(1, 2);
        let inputs = PlannerInputs { graph: &graph, models: &models, topo: &topo, table: &table };
        let outputs = [4];
        let reqs = specs(&outputs);
        let w = workload_from(&graph, &models, &reqs, &outputs);
        let plan = greedy_search(&inputs, w, &PlannerOptions::default()).unwrap();
        let err = run_with_oracle(
            &plan,
            &graph,
            &models,
            &topo,
            &table,
            &reqs,
            &OracleWorkload::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Mismatch(_)));
        assert!(err.to_string().contains("r0"));
    }

    #[test]
    fn segments_cover_gpus_without_overlap() {
        let (graph, models, topo, table) = fixture(2, 2);
        let inputs = PlannerInputs { graph: &graph, models: &models, topo: &topo, table: &table };
        let outputs = [6, 8];
        let reqs = specs(&outputs);
        let w = workload_from(&graph, &models, &reqs, &outputs);
        let plan = greedy_search(&inputs, w, &PlannerOptions::default()).unwrap();
        let trace =
            run_with_oracle(&plan, &graph, &models, &topo, &table, &reqs, &oracle(&outputs))
                .unwrap();
        for g in 0..topo.num_gpus {
            let mut spans: Vec<(f64, f64)> = trace
                .segments
                .iter()
                .filter(|s| s.gpu == g)
                .map(|s| (s.start, s.end))
                .collect();
            spans.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for w in spans.windows(2) {
                assert!(w[0].1 <= w[1].0 + 1e-12, "overlap on GPU {}: {:?}", g, w);
            }
        }
        let idle_sum: f64 = trace.idle.per_gpu.iter().sum();
        assert!((idle_sum - trace.idle.total_idle).abs() < 1e-9);
        assert_eq!(trace.idle.span, trace.total_time);
    }

    #[test]
    fn event_times_are_non_decreasing() {
        let (graph, models, topo, table) = fixture(3, 2);
        let inputs = PlannerInputs { graph: &graph, models: &models, topo: &topo, table: &table };
        let outputs = [3, 5, 7];
        let reqs = specs(&outputs);
        let w = workload_from(&graph, &models, &reqs, &outputs);
        let plan = greedy_search(&inputs, w, &PlannerOptions::default()).unwrap();
        let actual = [5, 3, 9];
        let trace =
            run_with_oracle(&plan, &graph, &models, &topo, &table, &reqs, &oracle(&actual))
                .unwrap();
        for w in trace.events.windows(2) {
            assert!(w[0].time <= w[1].time);
        }
        assert_eq!(trace.finished_requests, 3);
    }
}
