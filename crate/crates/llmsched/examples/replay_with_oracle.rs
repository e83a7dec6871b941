//! Replays a plan against true output lengths and reacts to mispredictions.
//!
//! A plan is built from lengths sampled out of each model's eCDF, so at run
//! time models finish in a different order than planned. The replay walks
//! the planned stages with the true lengths and adjusts at every finish:
//! models whose planned stage ended keep running, pause, or stop depending
//! on whether the next stage needs their GPUs.
//!
//! Three replays of the same plan:
//!
//! 1. the oracle equals the planner's own draws — the replay reproduces the
//!    planned timeline exactly (error ratio 0);
//! 2. the oracle is re-drawn with another seed — the error ratio is small
//!    but nonzero;
//! 3. one model runs three times longer than profiled — the finish order
//!    breaks and the event log shows the replay keeping the straggler
//!    running while the rest of the plan proceeds.
//!
//! Run with: `cargo run --example replay_with_oracle`

use std::collections::BTreeMap;

use llmsched::cost::CostTable;
use llmsched::graph::{AppEdge, AppGraph, AppNode, EdgeMode};
use llmsched::lengths::OutputLengthEcdf;
use llmsched::planner::PlannerInputs;
use llmsched::runtime::EventKind;
use llmsched::workload::Predecessor;
use llmsched::{
    build_ecdf, enumerate_valid_plans, greedy_search, run_with_oracle, GpuTopology,
    LengthTransfer, ModelSpec, OracleWorkload, PhaseKind, PlannerOptions, RequestSpec,
    RuntimeTrace, WorkloadState,
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
        allowed_tp: [1, 2, 4, 8].into_iter().collect(),
    }
}

fn node() -> GpuTopology {
    GpuTopology {
        num_gpus: 8,
        mem_bytes_per_gpu: 80 * (1u64 << 30),
        nvlink_groups: vec![(0..8).collect()],
        reserved_mem_fraction: 0.10,
    }
}

fn cost_table(models: &[ModelSpec], topo: &GpuTopology) -> CostTable {
    let mut t = CostTable::new();
    for m in models {
        for tp in [1u64, 2, 4, 8] {
            for bucket in [1u64, 64] {
                t.set_phase(&m.id, tp, PhaseKind::Comp, bucket, 1.0 / (120e12 * tp as f64), 0.004);
                t.set_phase(&m.id, tp, PhaseKind::Prep, bucket, 2.0e-8, 0.001);
                t.set_phase(&m.id, tp, PhaseKind::Samp, bucket, 5.0e-8, 0.0005);
            }
        }
        for plan in enumerate_valid_plans(m, topo) {
            t.set_loading(&m.id, plan, m.weight_bytes as f64 / 25e9 + 4.0);
        }
    }
    t
}

/// Three generators whose drafts a reviewer merges pairwise: enough models
/// per stage that a flipped finish order forces real adjustments.
fn build_app() -> (AppGraph, Vec<ModelSpec>, Vec<RequestSpec>) {
    let models = vec![
        model("drafter-7b", 32, 4096, 14),
        model("coder-13b", 40, 5120, 26),
        model("prose-13b", 40, 5120, 26),
        model("reviewer-34b", 48, 7168, 68),
    ];
    let mut nodes = vec![AppNode { id: "review".into(), model_id: "reviewer-34b".into(), max_output_tokens: None }];
    let mut edges = Vec::new();
    for src in ["draft", "code", "prose"] {
        let model_id = match src {
            "draft" => "drafter-7b",
            "code" => "coder-13b",
            _ => "prose-13b",
        };
        nodes.push(AppNode { id: src.into(), model_id: model_id.into(), max_output_tokens: None });
        edges.push(AppEdge {
            src: src.into(),
            dst: "review".into(),
            mode: EdgeMode::Concat,
            overhead_tokens: 12,
        });
    }
    let graph = AppGraph { nodes, edges, chain_overhead: BTreeMap::new() };

    let mut requests = Vec::new();
    for i in 0..40u64 {
        let base = 180 + (i * 61) % 450;
        for src in ["draft", "code", "prose"] {
            requests.push(RequestSpec {
                id: format!("t{:02}-{}", i, src),
                node_id: src.into(),
                base_input_len: base,
                predecessors: vec![],
                ready: true,
            });
        }
        requests.push(RequestSpec {
            id: format!("t{:02}-review", i),
            node_id: "review".into(),
            base_input_len: 120,
            predecessors: ["draft", "code", "prose"]
                .iter()
                .map(|src| Predecessor {
                    request_id: format!("t{:02}-{}", i, src),
                    transfer: LengthTransfer::AddOutputLen,
                })
                .collect(),
            ready: false,
        });
    }
    (graph, models, requests)
}

fn ecdfs() -> llmsched::Result<BTreeMap<String, OutputLengthEcdf>> {
    let draft: Vec<u64> = (0..300).map(|i| 60 + (i * 29) % 240).collect();
    let code: Vec<u64> = (0..300).map(|i| 90 + (i * 37) % 420).collect();
    let prose: Vec<u64> = (0..300).map(|i| 70 + (i * 31) % 300).collect();
    let review: Vec<u64> = (0..300).map(|i| 120 + (i * 43) % 260).collect();
    let mut out = BTreeMap::new();
    out.insert("drafter-7b".into(), build_ecdf("drafter-7b", &draft)?);
    out.insert("coder-13b".into(), build_ecdf("coder-13b", &code)?);
    out.insert("prose-13b".into(), build_ecdf("prose-13b", &prose)?);
    out.insert("reviewer-34b".into(), build_ecdf("reviewer-34b", &review)?);
    Ok(out)
}

/// The planner's own draws, keyed by request id — replaying against these
/// must reproduce the plan exactly.
fn planner_draws(
    graph: &AppGraph,
    models: &[ModelSpec],
    requests: &[RequestSpec],
    seed: u64,
) -> llmsched::Result<OracleWorkload> {
    let mut w = WorkloadState::new(graph, models, requests)?;
    w.sample_raw_lengths(graph, &ecdfs()?, seed)?;
    Ok(OracleWorkload(
        w.iter().map(|r| (r.spec.id.clone(), r.raw_output_len.unwrap())).collect(),
    ))
}

fn print_trace(label: &str, trace: &RuntimeTrace) {
    println!(
        "{}: measured {:.3} s vs planned {:.3} s  (error ratio {:.6}), {} requests finished",
        label,
        trace.total_time,
        trace.planned_total,
        trace.error_ratio(),
        trace.finished_requests
    );
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for ev in &trace.events {
        let key = match ev.kind {
            EventKind::ModelStarted => "model_started",
            EventKind::ModelFinished => "model_finished",
            EventKind::StageAdvanced => "stage_advanced",
            EventKind::ModelKeptRunning => "model_kept_running",
            EventKind::ModelStopped => "model_stopped",
            EventKind::PlacementMoved => "placement_moved",
        };
        *counts.entry(key).or_default() += 1;
    }
    println!("  events: {:?}", counts);
    println!(
        "  idle: {:.1} GPU-seconds over a {:.3} s span",
        trace.idle.total_idle, trace.idle.span
    );
}

fn main() -> llmsched::Result<()> {
    let (graph, models, requests) = build_app();
    let graph = graph.fuse_self_loops()?;
    let topo = node();
    let table = cost_table(&models, &topo);
    let models_by_id: BTreeMap<String, ModelSpec> =
        models.iter().map(|m| (m.id.clone(), m.clone())).collect();

    let seed = 21;
    let mut workload = WorkloadState::new(&graph, &models, &requests)?;
    workload.sample_raw_lengths(&graph, &ecdfs()?, seed)?;
    workload.resolve_roots()?;
    let inputs = PlannerInputs {
        graph: &graph,
        models: &models_by_id,
        topo: &topo,
        table: &table,
    };
    let opts = PlannerOptions { allow_preemption: true, max_num_seqs: 256, seed };
    let plan = greedy_search(&inputs, workload, &opts)?;
    println!("plan: {:.3} s over {} stages", plan.total_latency, plan.stages.len());
    for (idx, stage) in plan.stages.iter().enumerate() {
        let entries = stage
            .entries
            .iter()
            .map(|e| format!("{} {}", e.node_id, e.plan.key()))
            .collect::<Vec<_>>()
            .join(", ");
        println!("  stage {}: t {:>7.3} .. {:>7.3}  [{}]", idx, stage.start_time, stage.end_time, entries);
    }
    println!();

    // Replay 1: the oracle is exactly what the planner assumed.
    let exact = planner_draws(&graph, &models, &requests, seed)?;
    let trace = run_with_oracle(&plan, &graph, &models_by_id, &topo, &table, &requests, &exact)?;
    print_trace("oracle = planner draws", &trace);
    assert_eq!(trace.total_time, plan.total_latency, "self-replay must be exact");
    assert_eq!(trace.error_ratio(), 0.0);

    // Replay 2: true lengths drawn with another seed — same distributions,
    // different draws, so the makespan shifts a little.
    println!();
    let perturbed = planner_draws(&graph, &models, &requests, seed + 1000)?;
    let trace = run_with_oracle(&plan, &graph, &models_by_id, &topo, &table, &requests, &perturbed)?;
    print_trace("oracle = re-drawn lengths", &trace);
    assert!(trace.error_ratio() > 0.0, "perturbed lengths should shift the makespan");

    // Replay 3: the prose model turns out three times chattier than its
    // profile said. The plan retires it after stage 1, but at that boundary
    // it is nowhere near done; instead of stranding it, the replay keeps it
    // running beside the later stages until its requests drain.
    println!();
    let mut surprise = exact.clone();
    for (id, len) in surprise.0.iter_mut() {
        if id.ends_with("-prose") {
            *len *= 3;
        }
    }
    let trace = run_with_oracle(&plan, &graph, &models_by_id, &topo, &table, &requests, &surprise)?;
    print_trace("oracle = prose 3x longer", &trace);
    assert!(
        trace.events.iter().any(|e| e.kind == EventKind::ModelKeptRunning),
        "the straggler should be kept running past its planned stages"
    );

    println!("\nadjustment events under the straggler oracle:");
    let mut shown = 0;
    for ev in &trace.events {
        let interesting = matches!(
            ev.kind,
            EventKind::ModelKeptRunning | EventKind::ModelStopped | EventKind::StageAdvanced
        );
        if interesting {
            println!(
                "  t={:>8.3}  {:<18}  {:<8}  {}",
                ev.time,
                format!("{:?}", ev.kind),
                ev.node_id.as_deref().unwrap_or("-"),
                ev.detail
            );
            shown += 1;
            if shown == 14 {
                break;
            }
        }
    }
    Ok(())
}
