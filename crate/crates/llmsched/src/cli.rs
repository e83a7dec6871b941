//! Command implementations behind the `llmsched` binary.
//!
//! Each subcommand is a plain function over parsed paths and flags, so tests
//! and examples can drive the full pipeline without spawning a process. The
//! binary itself only parses arguments and maps [`Error`] values to exit
//! codes (0 success, 2 input error, 3 infeasible, 4 plan/input mismatch).
//!
//! All reported times are simulated: the "actual" runtime is a replay of the
//! plan against given (oracle) output lengths, not a GPU measurement.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::baselines::{max_heuristic, min_heuristic};
use crate::catalog::{GpuTopology, ModelSpec};
use crate::cost::{fit_coefficients, CostTable, FitOptions};
use crate::error::{Error, Result};
use crate::formats;
use crate::gantt::render_gantt;
use crate::graph::AppGraph;
use crate::lengths::{build_ecdf, OutputLengthEcdf};
use crate::placement::{place_stage, PlacementRequest, PlacementState};
use crate::planner::{greedy_search, AppPlan, PlannerInputs, PlannerOptions};
use crate::runtime::{run_with_oracle, OracleWorkload, RuntimeTrace};
use crate::sim::DEFAULT_MAX_NUM_SEQS;
use crate::workload::{RequestSpec, WorkloadState};

/// Planning algorithm selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algo {
    /// Greedy stage search over throughput gain per added GPU.
    Greedy,
    /// One model at a time on the whole node.
    Max,
    /// GPUs split as evenly as possible across all ready models.
    Min,
}

impl Algo {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algo::Greedy => "greedy",
            Algo::Max => "max",
            Algo::Min => "min",
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Algo::Greedy),
            "max" => Ok(Algo::Max),
            "min" => Ok(Algo::Min),
            other => Err(Error::Config(format!(
                "unknown algorithm '{}' (expected greedy, max or min)",
                other
            ))),
        }
    }
}

/// Paths and knobs shared by the `plan`, `baseline` and `run` commands.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub models: PathBuf,
    pub gpus: PathBuf,
    pub cost_table: PathBuf,
    pub ecdf: PathBuf,
    pub app: PathBuf,
    pub requests: PathBuf,
    pub seed: u64,
    pub algo: Algo,
    /// Forbid re-planning a started, unfinished model at stage boundaries.
    pub no_preemption: bool,
    /// CSV of true output lengths (`request_id,output_len`). When set, the
    /// planner assumes these lengths instead of sampling from the eCDFs, and
    /// `run` replays against them.
    pub known_lengths: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Dump per-iteration CSVs next to trace.json during `run`.
    pub trace_iterations: bool,
}

/// Everything `plan`/`run` read from disk, parsed and cross-validated.
pub struct LoadedInputs {
    pub models: BTreeMap<String, ModelSpec>,
    pub topo: GpuTopology,
    pub table: CostTable,
    pub ecdfs: BTreeMap<String, OutputLengthEcdf>,
    /// The application graph with self-loop chains already fused.
    pub graph: AppGraph,
    pub requests: Vec<RequestSpec>,
}

impl LoadedInputs {
    pub fn model_list(&self) -> Vec<ModelSpec> {
        self.models.values().cloned().collect()
    }
}

pub fn load_inputs(cfg: &RunConfig) -> Result<LoadedInputs> {
    let model_list = formats::read_models(&cfg.models)?;
    let topo = formats::read_gpus(&cfg.gpus)?;
    let table = formats::read_cost_table(&cfg.cost_table)?;
    let ecdfs = formats::read_ecdfs(&cfg.ecdf)?;
    let graph = formats::read_app(&cfg.app)?.fuse_self_loops()?;
    let requests = formats::read_requests(&cfg.requests)?;

    let models: BTreeMap<String, ModelSpec> =
        model_list.iter().map(|m| (m.id.clone(), m.clone())).collect();
    for node in &graph.nodes {
        if !models.contains_key(&node.model_id) {
            return Err(Error::Config(format!(
                "application node '{}' uses model '{}', which {} does not define",
                node.id,
                node.model_id,
                cfg.models.display()
            )));
        }
    }
    table.validate_coverage(&model_list, &topo)?;

    Ok(LoadedInputs { models, topo, table, ecdfs, graph, requests })
}

/// The output lengths the planner assumes: the known-lengths file when given,
/// otherwise deterministic seeded draws from the eCDFs. `run` replays against
/// the same lengths by default, which makes the replay reproduce the plan
/// exactly.
pub fn assumed_lengths(inputs: &LoadedInputs, cfg: &RunConfig) -> Result<OracleWorkload> {
    if let Some(path) = &cfg.known_lengths {
        return formats::read_oracle_csv(path);
    }
    let model_list = inputs.model_list();
    let mut workload = WorkloadState::new(&inputs.graph, &model_list, &inputs.requests)?;
    workload.sample_raw_lengths(&inputs.graph, &inputs.ecdfs, cfg.seed)?;
    Ok(OracleWorkload(
        workload
            .iter()
            .map(|r| (r.spec.id.clone(), r.raw_output_len.expect("just sampled")))
            .collect(),
    ))
}

fn workload_with_lengths(
    inputs: &LoadedInputs,
    lengths: &OracleWorkload,
) -> Result<WorkloadState> {
    let model_list = inputs.model_list();
    let mut workload = WorkloadState::new(&inputs.graph, &model_list, &inputs.requests)?;
    for spec in &inputs.requests {
        let len = lengths.get(&spec.id).ok_or_else(|| {
            Error::Config(format!("no output length given for request '{}'", spec.id))
        })?;
        workload.set_raw_output_length(&spec.id, len)?;
    }
    workload.resolve_roots()?;
    Ok(workload)
}

/// Fills every stage entry's concrete GPU ids by running the reload-minimizing
/// placement stage by stage, carrying residency forward.
fn annotate_gpus(plan: &mut AppPlan, topo: &GpuTopology, table: &CostTable) -> Result<()> {
    let mut prev = PlacementState::empty(topo.num_gpus);
    for stage in &mut plan.stages {
        let requests: Vec<PlacementRequest> = stage
            .entries
            .iter()
            .map(|e| PlacementRequest {
                node_id: e.node_id.clone(),
                model_id: e.model_id.clone(),
                plan: e.plan,
            })
            .collect();
        let outcome = place_stage(&prev, &requests, topo, table)?;
        for entry in &mut stage.entries {
            let resident = outcome
                .state
                .resident
                .get(&entry.node_id)
                .expect("placed entry is resident");
            let mut gpus: Vec<usize> =
                resident.replica_gpus.iter().flatten().copied().collect();
            gpus.sort_unstable();
            entry.gpus = gpus;
        }
        prev = outcome.state;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

/// Fits the iteration cost table from profiling samples (and optional
/// loading-time measurements) and writes it to `out`.
pub fn cmd_fit(
    profile: &Path,
    loading: Option<&Path>,
    trim_fraction: f64,
    out: &Path,
) -> Result<CostTable> {
    let samples = formats::read_profile_csv(profile)?;
    let loading_samples = match loading {
        Some(path) => formats::read_loading_csv(path)?,
        None => Vec::new(),
    };
    let table = fit_coefficients(&samples, &loading_samples, FitOptions { trim_fraction })?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)
                .map_err(|e| Error::Config(format!("cannot create {}: {}", dir.display(), e)))?;
        }
    }
    formats::write_cost_table(out, &table)?;

    let series: usize = table.coefficients.values().map(|by_tp| by_tp.len()).sum();
    let buckets: usize = table
        .coefficients
        .values()
        .flat_map(|by_tp| by_tp.values())
        .map(|triple| triple.comp.buckets.len())
        .sum();
    println!(
        "fitted {} sample(s) into {} (model,tp) series with {} batch bucket(s); {} loading time(s)",
        samples.len(),
        series,
        buckets,
        table.loading_time.len()
    );
    println!("wrote {}", out.display());
    Ok(table)
}

// ---------------------------------------------------------------------------
// ecdf
// ---------------------------------------------------------------------------

/// Builds per-model output-length eCDFs from an observed length trace and
/// writes them to `out`.
pub fn cmd_ecdf(trace: &Path, out: &Path) -> Result<BTreeMap<String, OutputLengthEcdf>> {
    let traces = formats::read_length_trace_csv(trace)?;
    let mut ecdfs = BTreeMap::new();
    for (model_id, lengths) in &traces {
        ecdfs.insert(model_id.clone(), build_ecdf(model_id, lengths)?);
    }
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)
                .map_err(|e| Error::Config(format!("cannot create {}: {}", dir.display(), e)))?;
        }
    }
    formats::write_ecdfs(out, &ecdfs)?;
    for (model_id, ecdf) in &ecdfs {
        println!("{}: {} observation(s)", model_id, ecdf.len());
    }
    println!("wrote {}", out.display());
    Ok(ecdfs)
}

// ---------------------------------------------------------------------------
// plan / baseline
// ---------------------------------------------------------------------------

/// What `plan` produced, for callers that keep going (e.g. `run` in tests).
#[derive(Debug)]
pub struct PlanReport {
    pub plan: AppPlan,
    /// Wall-clock seconds the search itself took (the planning overhead).
    pub planning_seconds: f64,
    pub plan_path: PathBuf,
}

/// Runs the configured planning algorithm and writes `plan.json` into the
/// output directory.
pub fn cmd_plan(cfg: &RunConfig) -> Result<PlanReport> {
    let inputs = load_inputs(cfg)?;
    let lengths = assumed_lengths(&inputs, cfg)?;
    let workload = workload_with_lengths(&inputs, &lengths)?;

    let planner_inputs = PlannerInputs {
        graph: &inputs.graph,
        models: &inputs.models,
        topo: &inputs.topo,
        table: &inputs.table,
    };
    let opts = PlannerOptions {
        allow_preemption: !cfg.no_preemption,
        max_num_seqs: DEFAULT_MAX_NUM_SEQS,
        seed: cfg.seed,
    };

    let started = Instant::now();
    let mut plan = match cfg.algo {
        Algo::Greedy => greedy_search(&planner_inputs, workload, &opts)?,
        Algo::Max => max_heuristic(&planner_inputs, workload, &opts)?,
        Algo::Min => min_heuristic(&planner_inputs, workload, &opts)?,
    };
    let planning_seconds = started.elapsed().as_secs_f64();
    annotate_gpus(&mut plan, &inputs.topo, &inputs.table)?;

    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Error::Config(format!("cannot create {}: {}", cfg.out_dir.display(), e)))?;
    let plan_path = cfg.out_dir.join("plan.json");
    formats::write_plan(&plan_path, &plan)?;

    print_plan_report(&plan, planning_seconds, &inputs);
    println!("wrote {}", plan_path.display());
    Ok(PlanReport { plan, planning_seconds, plan_path })
}

/// `plan` restricted to the reference algorithms (`max`, `min`).
pub fn cmd_baseline(cfg: &RunConfig) -> Result<PlanReport> {
    if cfg.algo == Algo::Greedy {
        return Err(Error::Config(
            "baseline requires --algo max or --algo min".into(),
        ));
    }
    cmd_plan(cfg)
}

fn print_plan_report(plan: &AppPlan, planning_seconds: f64, inputs: &LoadedInputs) {
    println!(
        "plan: algorithm {}, seed {}, preemption {}",
        plan.algorithm,
        plan.seed,
        if plan.allow_preemption { "allowed" } else { "disabled" }
    );
    println!("planned total (simulated): {:.6} s", plan.total_latency);
    println!(
        "planning time: {:.6} s across {} candidate evaluation(s)",
        planning_seconds, plan.candidate_evaluations
    );
    println!("{:>5}  {:>10}  {:>10}  {:>4}  {:<14}  entries", "stage", "start", "duration", "gpus", "first finisher");
    for (idx, stage) in plan.stages.iter().enumerate() {
        let entries = stage
            .entries
            .iter()
            .map(|e| {
                format!(
                    "{}({}) {} gpus{:?}",
                    e.node_id,
                    e.model_id,
                    e.plan.key(),
                    e.gpus
                )
            })
            .collect::<Vec<_>>()
            .join("; ");
        println!(
            "{:>5}  {:>10.4}  {:>10.4}  {:>4}  {:<14}  {}",
            idx,
            stage.start_time,
            stage.duration,
            stage.gpus_used,
            stage.planned_first_finisher.as_deref().unwrap_or("-"),
            entries
        );
    }
    let mut per_model: BTreeMap<&str, u64> = BTreeMap::new();
    for spec in &inputs.requests {
        if let Some(node) = inputs.graph.node(&spec.node_id) {
            *per_model.entry(node.model_id.as_str()).or_default() += 1;
        }
    }
    let counts = per_model
        .iter()
        .map(|(model, n)| format!("{}={}", model, n))
        .collect::<Vec<_>>()
        .join(" ");
    println!("requests per model: {}", counts);
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

/// What `run` produced.
#[derive(Debug)]
pub struct RunReport {
    pub trace: RuntimeTrace,
    pub trace_path: PathBuf,
    pub gantt_path: PathBuf,
    pub iteration_paths: Vec<PathBuf>,
}

/// Replays `plan_path` against the true lengths (the known-lengths file, or
/// by default the same seeded draws the planner used) and writes
/// `trace.json` and `gantt.svg` into the output directory.
pub fn cmd_run(cfg: &RunConfig, plan_path: &Path) -> Result<RunReport> {
    let inputs = load_inputs(cfg)?;
    let plan = formats::read_plan(plan_path)?;
    let oracle = assumed_lengths(&inputs, cfg)?;

    let trace = run_with_oracle(
        &plan,
        &inputs.graph,
        &inputs.models,
        &inputs.topo,
        &inputs.table,
        &inputs.requests,
        &oracle,
    )?;

    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Error::Config(format!("cannot create {}: {}", cfg.out_dir.display(), e)))?;
    let trace_path = cfg.out_dir.join("trace.json");
    formats::write_trace(&trace_path, &trace)?;
    let gantt_path = cfg.out_dir.join("gantt.svg");
    let svg = render_gantt(&trace, inputs.topo.num_gpus);
    fs::write(&gantt_path, svg)
        .map_err(|e| Error::Config(format!("cannot write {}: {}", gantt_path.display(), e)))?;

    let mut iteration_paths = Vec::new();
    if cfg.trace_iterations {
        for (node_id, records) in &trace.iterations {
            let name: String = node_id
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
                .collect();
            let path = cfg.out_dir.join(format!("iterations_{}.csv", name));
            formats::write_iterations_csv(&path, records)?;
            iteration_paths.push(path);
        }
    }

    print_run_report(&trace);
    println!("wrote {} and {}", trace_path.display(), gantt_path.display());
    Ok(RunReport { trace, trace_path, gantt_path, iteration_paths })
}

fn print_run_report(trace: &RuntimeTrace) {
    println!(
        "replayed total (simulated): {:.6} s; planned estimate: {:.6} s",
        trace.total_time, trace.planned_total
    );
    println!("estimation error ratio: {:.6}", trace.error_ratio());
    println!("finished requests: {}", trace.finished_requests);
    println!(
        "gpu idle: {:.6} s total across {} GPU(s) over a {:.6} s span",
        trace.idle.total_idle,
        trace.idle.per_gpu.len(),
        trace.idle.span
    );
}
