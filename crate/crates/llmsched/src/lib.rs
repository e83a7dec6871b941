//! Planner and simulator for running several LLM inference jobs on one
//! multi-GPU node.
//!
//! Applications that pipe prompts through multiple LLMs (routing, chained
//! summarization, ensembling) finish much faster when the models share the
//! node under a schedule instead of each monopolizing it. This crate plans
//! such schedules offline and predicts their makespan on the CPU:
//!
//! ```text
//!  models.json  gpus.json        profile.csv        trace.csv
//!       \          |                  |                 |
//!        \         |             fit (cost)        build_ecdf (lengths)
//!         \        |                  |                 |
//!          +-------+------ cost_table.json -------- ecdf.json
//!                  |                                    |
//!   app.json ------+--- planner (greedy / max / min) ---+--> plan.json
//!   requests.json  |                                    |
//!                  +--- runtime (replay vs. oracle) ----+--> trace.json
//!                                                            gantt.svg
//! ```
//!
//! * [`catalog`] — model/GPU descriptions, `(dp, tp)` plan enumeration.
//! * [`cost`] — analytical FLOP counts and the fitted iteration-latency model.
//! * [`lengths`] — deterministic output-length sampling from empirical CDFs.
//! * [`graph`] / [`workload`] — application graphs and request dependency state.
//! * [`sim`] — iteration-level continuous-batching simulation.
//! * [`planner`] — greedy stage construction over throughput gains.
//! * [`baselines`] — one-model-at-a-time and even-split reference schedulers.
//! * [`placement`] — NVLink-aware mapping of replicas onto GPUs.
//! * [`runtime`] — replay of a plan against true ("oracle") output lengths
//!   with dynamic adjustment, Gantt/idle reporting.
//! * [`formats`] / [`cli`] — file formats and the command-line entry points.

pub mod baselines;
pub mod catalog;
pub mod cli;
pub mod cost;
pub mod error;
pub mod formats;
pub mod gantt;
pub mod graph;
pub mod lengths;
pub mod placement;
pub mod planner;
pub mod runtime;
pub mod sim;
pub mod workload;

pub use catalog::{enumerate_valid_plans, plan_is_valid, ExecutionPlan, GpuTopology, ModelSpec};
pub use cost::{
    fit_coefficients, flops_decode, flops_prefill, iter_latency, CostTable, IterationDescriptor,
    IterationKind, PhaseCoefficients, PhaseKind,
};
pub use error::{Error, Result};
pub use graph::{AppGraph, EdgeMode};
pub use lengths::{build_ecdf, sample_output_length, OutputLengthEcdf};
pub use gantt::render_gantt;
pub use planner::{greedy_search, stage_metrics, AppPlan, PlannerOptions, Stage, StageEntry};
pub use runtime::{gpu_idle_report, run_with_oracle, OracleWorkload, RuntimeTrace};
pub use sim::{simulate_model, simulate_stage, EngineConfig, SimResult};
pub use workload::{LengthTransfer, RequestSpec, WorkloadState};
