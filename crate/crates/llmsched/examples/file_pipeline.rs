//! The full file-driven workflow: profile CSVs in, plan and trace files out.
//!
//! Everything the `llmsched` binary does is available as library calls.
//! This example writes a complete set of input files into a scratch
//! directory, then drives the same entry points the CLI subcommands use:
//!
//! ```text
//! profile.csv + loading.csv --fit-->  cost_table.json
//! lengths.csv             --ecdf-->  ecdf.json
//! models/gpus/app/requests.json --plan--> plan.json
//! plan.json               --run-->   trace.json + gantt.svg + iterations_*.csv
//! ```
//!
//! The default `run` replays the plan against the planner's own assumed
//! lengths, which must reproduce the planned makespan exactly; a second run
//! replays the same plan against a `--known-lengths` oracle file with
//! longer outputs, and the divergence shows up as a nonzero error ratio.
//!
//! Run with: `cargo run --example file_pipeline`

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use llmsched::cli::{cmd_ecdf, cmd_fit, cmd_plan, cmd_run, Algo, RunConfig};
use llmsched::cost::{LoadingSample, ProfileSample};
use llmsched::formats;
use llmsched::graph::{AppEdge, AppGraph, AppNode, EdgeMode};
use llmsched::workload::Predecessor;
use llmsched::{
    GpuTopology, LengthTransfer, ModelSpec, OracleWorkload, PhaseKind, RequestSpec, WorkloadState,
};

fn model(id: &str, layers: u64, hidden: u64, weight_gb: u64) -> ModelSpec {
    ModelSpec {
        id: id.into(),
        num_layers: layers,
        hidden_dim: hidden,
        matmul_weight_sum: (weight_gb as f64) * 1.0e9 / 2.0 / layers as f64,
        max_seq_len: 4096,
        weight_bytes: weight_gb * 1_000_000_000,
        kv_bytes_per_token_per_layer: 4 * hidden,
        allowed_tp: [1, 2].into_iter().collect(),
    }
}

/// Synthetic profiler: exactly linear per-phase latencies, so the fitted
/// coefficients reproduce the generator.
fn profile_rows(models: &[ModelSpec]) -> Vec<ProfileSample> {
    let mut rows = Vec::new();
    for m in models {
        for tp in [1u64, 2] {
            for batch in [1u64, 64] {
                let phases = [
                    (PhaseKind::Comp, 1.0 / (120e12 * tp as f64), 0.004, [0.5e12, 1.0e12, 2.0e12]),
                    (PhaseKind::Prep, 2.0e-8, 0.001, [256.0, 1024.0, 4096.0]),
                    (PhaseKind::Samp, 5.0e-8, 0.0005, [1.0, 24.0, 64.0]),
                ];
                for (phase, a, b, xs) in phases {
                    for x in xs {
                        rows.push(ProfileSample {
                            model_id: m.id.clone(),
                            tp,
                            phase,
                            batch,
                            x,
                            latency_s: a * x + b,
                        });
                    }
                }
            }
        }
    }
    rows
}

fn loading_rows(models: &[ModelSpec], topo: &GpuTopology) -> Vec<LoadingSample> {
    let mut rows = Vec::new();
    for m in models {
        for plan in llmsched::enumerate_valid_plans(m, topo) {
            rows.push(LoadingSample {
                model_id: m.id.clone(),
                plan,
                seconds: m.weight_bytes as f64 / 25e9 + 4.0,
            });
        }
    }
    rows
}

fn build_inputs(dir: &Path) -> llmsched::Result<()> {
    let models = vec![model("gate-7b", 32, 4096, 14), model("writer-13b", 40, 5120, 26)];
    let topo = GpuTopology {
        num_gpus: 4,
        mem_bytes_per_gpu: 80 * (1u64 << 30),
        nvlink_groups: vec![vec![0, 1, 2, 3]],
        reserved_mem_fraction: 0.10,
    };
    let graph = AppGraph {
        nodes: vec![
            AppNode { id: "gate".into(), model_id: "gate-7b".into(), max_output_tokens: Some(16) },
            AppNode { id: "write".into(), model_id: "writer-13b".into(), max_output_tokens: None },
        ],
        edges: vec![AppEdge {
            src: "gate".into(),
            dst: "write".into(),
            mode: EdgeMode::Independent,
            overhead_tokens: 10,
        }],
        chain_overhead: BTreeMap::new(),
    };
    let mut requests = Vec::new();
    for i in 0..24u64 {
        requests.push(RequestSpec {
            id: format!("q{:02}", i),
            node_id: "gate".into(),
            base_input_len: 120 + (i * 83) % 400,
            predecessors: vec![],
            ready: true,
        });
        requests.push(RequestSpec {
            id: format!("q{:02}-out", i),
            node_id: "write".into(),
            base_input_len: 60,
            predecessors: vec![Predecessor {
                request_id: format!("q{:02}", i),
                transfer: LengthTransfer::AddOutputLen,
            }],
            ready: false,
        });
    }

    formats::write_models(&dir.join("models.json"), &models)?;
    formats::write_gpus(&dir.join("gpus.json"), &topo)?;
    formats::write_app(&dir.join("app.json"), &graph)?;
    formats::write_requests(&dir.join("requests.json"), &requests)?;
    formats::write_profile_csv(&dir.join("profile.csv"), &profile_rows(&models))?;
    formats::write_loading_csv(&dir.join("loading.csv"), &loading_rows(&models, &topo))?;

    // Observed output lengths, as a production log would provide them.
    let mut traces: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    traces.insert("gate-7b".into(), (0..120).map(|i| 4 + i % 14).collect());
    traces.insert("writer-13b".into(), (0..120).map(|i| 60 + (i * 37) % 220).collect());
    formats::write_length_trace_csv(&dir.join("lengths.csv"), &traces)?;
    Ok(())
}

fn main() -> llmsched::Result<()> {
    let dir = std::env::temp_dir().join("llmsched_pipeline");
    fs::create_dir_all(&dir)?;
    build_inputs(&dir)?;
    println!("inputs written to {}\n", dir.display());

    println!("== fit ==");
    cmd_fit(&dir.join("profile.csv"), Some(&dir.join("loading.csv")), 0.0, &dir.join("cost_table.json"))?;

    println!("\n== ecdf ==");
    cmd_ecdf(&dir.join("lengths.csv"), &dir.join("ecdf.json"))?;

    let cfg = RunConfig {
        models: dir.join("models.json"),
        gpus: dir.join("gpus.json"),
        cost_table: dir.join("cost_table.json"),
        ecdf: dir.join("ecdf.json"),
        app: dir.join("app.json"),
        requests: dir.join("requests.json"),
        seed: 3,
        algo: Algo::Greedy,
        no_preemption: false,
        known_lengths: None,
        out_dir: dir.clone(),
        trace_iterations: true,
    };

    println!("\n== plan ==");
    let planned = cmd_plan(&cfg)?;

    println!("\n== run (oracle = the planner's own draws) ==");
    let report = cmd_run(&cfg, &planned.plan_path)?;
    assert_eq!(report.trace.total_time, planned.plan.total_latency, "self-replay must be exact");

    // A what-if oracle: the writer model generates 25% more tokens than the
    // eCDF draws assumed. `run --known-lengths` replays the same plan
    // against it.
    let ecdfs = formats::read_ecdfs(&dir.join("ecdf.json"))?;
    let graph = formats::read_app(&dir.join("app.json"))?.fuse_self_loops()?;
    let models = formats::read_models(&dir.join("models.json"))?;
    let requests = formats::read_requests(&dir.join("requests.json"))?;
    let mut w = WorkloadState::new(&graph, &models, &requests)?;
    w.sample_raw_lengths(&graph, &ecdfs, cfg.seed)?;
    let oracle = OracleWorkload(
        w.iter()
            .map(|r| {
                let raw = r.raw_output_len.unwrap();
                let len = if r.spec.node_id == "write" { raw * 5 / 4 } else { raw };
                (r.spec.id.clone(), len)
            })
            .collect(),
    );
    formats::write_oracle_csv(&dir.join("true_lengths.csv"), &oracle)?;

    println!("\n== run --known-lengths true_lengths.csv (writer 25% chattier) ==");
    let mut what_if = cfg.clone();
    what_if.known_lengths = Some(dir.join("true_lengths.csv"));
    what_if.out_dir = dir.join("what_if");
    let divergent = cmd_run(&what_if, &planned.plan_path)?;
    assert!(divergent.trace.error_ratio() > 0.0);

    println!("\nartifacts:");
    let mut names: Vec<_> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.path())
        .collect();
    names.sort();
    for p in names {
        println!("  {:<18} {:>6} bytes", p.file_name().unwrap().to_string_lossy(), p.metadata()?.len());
    }
    println!("  what_if/           trace.json + gantt.svg for the divergent replay");

    // plan.json is canonical: reading and re-writing it is byte-identical,
    // so plans can live under version control.
    let plan_bytes = fs::read(&planned.plan_path)?;
    let reread = formats::read_plan(&planned.plan_path)?;
    let copy_path = dir.join("plan_copy.json");
    formats::write_plan(&copy_path, &reread)?;
    assert_eq!(plan_bytes, fs::read(&copy_path)?, "plan.json round-trips byte-identically");
    fs::remove_file(&copy_path)?;
    println!("\nplan.json round-trips byte-identically through read + write");
    Ok(())
}
