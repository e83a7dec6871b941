//! Renders a replayed schedule as an SVG Gantt chart.
//!
//! A triage model reads support tickets and routes each to a resolver or an
//! escalation model. The greedy planner packs the three models onto a
//! 4-GPU node; the plan is then replayed against output lengths it did not
//! expect, and the resulting trace — one row per GPU, one colored block per
//! model tenure, dashed rules at stage boundaries — is rendered to SVG.
//!
//! The rendering is deterministic: the same trace always yields the same
//! bytes, which keeps chart files diffable.
//!
//! Run with: `cargo run --example gantt_chart`

use std::collections::BTreeMap;

use llmsched::cost::CostTable;
use llmsched::graph::{AppEdge, AppGraph, AppNode, EdgeMode};
use llmsched::lengths::OutputLengthEcdf;
use llmsched::planner::PlannerInputs;
use llmsched::workload::Predecessor;
use llmsched::{
    build_ecdf, enumerate_valid_plans, greedy_search, render_gantt, run_with_oracle, GpuTopology,
    LengthTransfer, ModelSpec, OracleWorkload, PhaseKind, PlannerOptions, RequestSpec,
    WorkloadState,
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
        allowed_tp: [1, 2, 4].into_iter().collect(),
    }
}

fn node() -> GpuTopology {
    GpuTopology {
        num_gpus: 4,
        mem_bytes_per_gpu: 80 * (1u64 << 30),
        nvlink_groups: vec![vec![0, 1], vec![2, 3]],
        reserved_mem_fraction: 0.10,
    }
}

fn cost_table(models: &[ModelSpec], topo: &GpuTopology) -> CostTable {
    let mut t = CostTable::new();
    for m in models {
        for tp in [1u64, 2, 4] {
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

fn build_app() -> (AppGraph, Vec<ModelSpec>, Vec<RequestSpec>) {
    let models = vec![
        model("triage-7b", 32, 4096, 14),
        model("resolver-13b", 40, 5120, 26),
        model("escalation-34b", 48, 7168, 68),
    ];
    let graph = AppGraph {
        nodes: vec![
            AppNode { id: "triage".into(), model_id: "triage-7b".into(), max_output_tokens: Some(24) },
            AppNode { id: "resolve".into(), model_id: "resolver-13b".into(), max_output_tokens: None },
            AppNode { id: "escalate".into(), model_id: "escalation-34b".into(), max_output_tokens: None },
        ],
        edges: ["resolve", "escalate"]
            .iter()
            .map(|dst| AppEdge {
                src: "triage".into(),
                dst: (*dst).into(),
                mode: EdgeMode::Independent,
                overhead_tokens: 6,
            })
            .collect(),
        chain_overhead: BTreeMap::new(),
    };

    // 60 tickets; roughly a third escalate, the rest get a direct answer.
    let mut requests = Vec::new();
    for i in 0..60u64 {
        requests.push(RequestSpec {
            id: format!("ticket{:02}", i),
            node_id: "triage".into(),
            base_input_len: 200 + (i * 71) % 600,
            predecessors: vec![],
            ready: true,
        });
        let dst = if i % 3 == 0 { "escalate" } else { "resolve" };
        requests.push(RequestSpec {
            id: format!("ticket{:02}-answer", i),
            node_id: dst.into(),
            base_input_len: 80,
            predecessors: vec![Predecessor {
                request_id: format!("ticket{:02}", i),
                transfer: LengthTransfer::AddOutputLen,
            }],
            ready: false,
        });
    }
    (graph, models, requests)
}

fn ecdfs() -> llmsched::Result<BTreeMap<String, OutputLengthEcdf>> {
    let triage: Vec<u64> = (0..200).map(|i| 6 + i % 20).collect();
    let resolve: Vec<u64> = (0..200).map(|i| 60 + (i * 33) % 260).collect();
    let escalate: Vec<u64> = (0..200).map(|i| 150 + (i * 47) % 450).collect();
    let mut out = BTreeMap::new();
    out.insert("triage-7b".into(), build_ecdf("triage-7b", &triage)?);
    out.insert("resolver-13b".into(), build_ecdf("resolver-13b", &resolve)?);
    out.insert("escalation-34b".into(), build_ecdf("escalation-34b", &escalate)?);
    Ok(out)
}

fn draws(
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

fn main() -> llmsched::Result<()> {
    let (graph, models, requests) = build_app();
    let topo = node();
    let table = cost_table(&models, &topo);
    let models_by_id: BTreeMap<String, ModelSpec> =
        models.iter().map(|m| (m.id.clone(), m.clone())).collect();

    let seed = 5;
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
    println!("plan: {:.3} s over {} stages on {} GPUs", plan.total_latency, plan.stages.len(), topo.num_gpus);

    // Replay against lengths drawn with a different seed, so the chart
    // shows the adjusted schedule rather than the planned one.
    let oracle = draws(&graph, &models, &requests, seed + 99)?;
    let trace = run_with_oracle(&plan, &graph, &models_by_id, &topo, &table, &requests, &oracle)?;
    println!(
        "replayed: {:.3} s measured vs {:.3} s planned (error ratio {:.4})",
        trace.total_time,
        trace.planned_total,
        trace.error_ratio()
    );
    for (gpu, idle) in trace.idle.per_gpu.iter().enumerate() {
        println!("  gpu{}: {:>6.2} s idle ({:.0}% busy)", gpu, idle, 100.0 * (1.0 - idle / trace.idle.span));
    }

    let svg = render_gantt(&trace, topo.num_gpus);
    assert!(svg.starts_with("<svg "));
    assert_eq!(svg.matches("<title>").count(), trace.segments.len(), "one block per tenure");
    assert_eq!(svg, render_gantt(&trace, topo.num_gpus), "rendering is deterministic");

    let path = std::env::temp_dir().join("llmsched_gantt.svg");
    std::fs::write(&path, &svg)?;
    println!(
        "\nwrote {} ({} occupancy blocks, {} bytes) — open it in a browser",
        path.display(),
        trace.segments.len(),
        svg.len()
    );
    Ok(())
}
