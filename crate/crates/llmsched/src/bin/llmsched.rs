//! Thin argument parser over the command functions in [`llmsched::cli`].
//!
//! Exit codes: 0 success, 2 input error (also used by clap for bad usage),
//! 3 infeasible configuration, 4 plan/input mismatch.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use llmsched::cli::{self, Algo, RunConfig};

#[derive(Parser)]
#[command(
    name = "llmsched",
    version,
    about = "Plan and simulate schedules for multiple LLM inference jobs on one multi-GPU node"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the iteration-latency cost table from profiling samples.
    Fit {
        /// Profiling CSV with header `model_id,tp,phase,B,x,latency_s`.
        #[arg(long)]
        profile: PathBuf,
        /// Loading-time CSV with header `model_id,dp,tp,seconds`.
        #[arg(long)]
        loading: Option<PathBuf>,
        /// Fraction of worst residuals to drop per bucket before refitting.
        #[arg(long, default_value_t = 0.0)]
        trim_fraction: f64,
        /// Where to write the fitted table.
        #[arg(long, default_value = "cost_table.json")]
        out: PathBuf,
    },
    /// Build per-model output-length distributions from an observed trace.
    Ecdf {
        /// Length-trace CSV with header `model_id,output_len`.
        #[arg(long)]
        trace: PathBuf,
        /// Where to write the distributions.
        #[arg(long, default_value = "ecdf.json")]
        out: PathBuf,
    },
    /// Search a staged execution plan and write plan.json.
    Plan(PlanArgs),
    /// Plan with a reference algorithm (--algo max or min).
    Baseline(PlanArgs),
    /// Replay a plan against true output lengths; write trace.json and gantt.svg.
    Run(RunArgs),
}

#[derive(Args)]
struct SharedArgs {
    /// models.json: the model catalog.
    #[arg(long)]
    models: PathBuf,
    /// gpus.json: the GPU node description.
    #[arg(long)]
    gpus: PathBuf,
    /// cost_table.json produced by `fit`.
    #[arg(long)]
    cost_table: PathBuf,
    /// ecdf.json produced by `ecdf`.
    #[arg(long)]
    ecdf: PathBuf,
    /// app.json: the application graph.
    #[arg(long)]
    app: PathBuf,
    /// requests.json: the request set.
    #[arg(long)]
    requests: PathBuf,
    /// Seed for the deterministic output-length draws.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Planning algorithm: greedy, max or min.
    #[arg(long, default_value = "greedy")]
    algo: Algo,
    /// Keep started models on their previous plan at stage boundaries.
    #[arg(long)]
    no_preemption: bool,
    /// CSV of true output lengths (`request_id,output_len`); replaces the
    /// sampled lengths.
    #[arg(long)]
    known_lengths: Option<PathBuf>,
    /// Directory for the output files.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    shared: SharedArgs,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    shared: SharedArgs,
    /// plan.json to replay (defaults to <out-dir>/plan.json).
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Also dump one `iterations_<node>.csv` per application node.
    #[arg(long)]
    trace_iterations: bool,
}

impl SharedArgs {
    fn into_config(self, trace_iterations: bool) -> RunConfig {
        RunConfig {
            models: self.models,
            gpus: self.gpus,
            cost_table: self.cost_table,
            ecdf: self.ecdf,
            app: self.app,
            requests: self.requests,
            seed: self.seed,
            algo: self.algo,
            no_preemption: self.no_preemption,
            known_lengths: self.known_lengths,
            out_dir: self.out_dir,
            trace_iterations,
        }
    }
}

fn run(command: Command) -> llmsched::Result<()> {
    match command {
        Command::Fit { profile, loading, trim_fraction, out } => {
            cli::cmd_fit(&profile, loading.as_deref(), trim_fraction, &out)?;
        }
        Command::Ecdf { trace, out } => {
            cli::cmd_ecdf(&trace, &out)?;
        }
        Command::Plan(args) => {
            cli::cmd_plan(&args.shared.into_config(false))?;
        }
        Command::Baseline(args) => {
            cli::cmd_baseline(&args.shared.into_config(false))?;
        }
        Command::Run(args) => {
            let cfg = args.shared.into_config(args.trace_iterations);
            let plan_path = args.plan.unwrap_or_else(|| cfg.out_dir.join("plan.json"));
            cli::cmd_run(&cfg, &plan_path)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err);
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
