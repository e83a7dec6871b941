//! Plans a multi-model routing application with the greedy stage search.
//!
//! A router model reads every user query and forwards it to one of three
//! expert models. Running the four models one after another on the whole
//! node wastes GPUs whenever a model's workload is too small to saturate
//! them; the greedy planner instead builds stages in which several models
//! share the node, each under its own (dp, tp) plan, sized by marginal
//! throughput per added GPU.
//!
//! Run with: `cargo run --example plan_greedy`

use std::collections::BTreeMap;

use llmsched::cost::CostTable;
use llmsched::graph::{AppEdge, AppGraph, AppNode, EdgeMode};
use llmsched::lengths::OutputLengthEcdf;
use llmsched::planner::PlannerInputs;
use llmsched::workload::Predecessor;
use llmsched::{
    build_ecdf, enumerate_valid_plans, greedy_search, AppPlan, GpuTopology, LengthTransfer,
    ModelSpec, PhaseKind, PlannerOptions, RequestSpec, WorkloadState,
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

/// Synthetic cost table: computation at 120 TFLOPs per GPU, small per-token
/// preparation and sampling costs, loading at 25 GB/s plus engine startup.
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
            let seconds = m.weight_bytes as f64 / 25e9 + 4.0;
            t.set_loading(&m.id, plan, seconds);
        }
    }
    t
}

fn build_app() -> (AppGraph, Vec<ModelSpec>, Vec<RequestSpec>) {
    let models = vec![
        model("router-7b", 32, 4096, 14),
        model("code-13b", 40, 5120, 26),
        model("math-13b", 40, 5120, 26),
        model("chat-34b", 48, 7168, 68),
    ];
    let nodes = ["router", "code", "math", "chat"];
    let graph = AppGraph {
        nodes: vec![
            AppNode { id: "router".into(), model_id: "router-7b".into(), max_output_tokens: Some(16) },
            AppNode { id: "code".into(), model_id: "code-13b".into(), max_output_tokens: None },
            AppNode { id: "math".into(), model_id: "math-13b".into(), max_output_tokens: None },
            AppNode { id: "chat".into(), model_id: "chat-34b".into(), max_output_tokens: None },
        ],
        edges: ["code", "math", "chat"]
            .iter()
            .map(|dst| AppEdge {
                src: "router".into(),
                dst: (*dst).into(),
                mode: EdgeMode::Independent,
                overhead_tokens: 8,
            })
            .collect(),
        chain_overhead: BTreeMap::new(),
    };

    // 120 user queries hit the router; each is then answered by exactly one
    // expert, picked here with a deterministic skew (math-heavy workload).
    let mut requests = Vec::new();
    for i in 0..120u64 {
        requests.push(RequestSpec {
            id: format!("q{:03}-route", i),
            node_id: "router".into(),
            base_input_len: 150 + (i * 97) % 500,
            predecessors: vec![],
            ready: true,
        });
        let expert = nodes[1 + ((i * 7) % 10 % 3).min(2) as usize];
        let expert = if i % 10 < 4 { "math" } else { expert };
        requests.push(RequestSpec {
            id: format!("q{:03}-answer", i),
            node_id: expert.into(),
            base_input_len: 150 + (i * 97) % 500,
            predecessors: vec![Predecessor {
                request_id: format!("q{:03}-route", i),
                transfer: LengthTransfer::AddOutputLen,
            }],
            ready: false,
        });
    }
    (graph, models, requests)
}

fn ecdfs() -> llmsched::Result<BTreeMap<String, OutputLengthEcdf>> {
    let mut out = BTreeMap::new();
    // Routing decisions are a handful of tokens; expert answers are longer.
    let router: Vec<u64> = (0..200).map(|i| 4 + i % 12).collect();
    let code: Vec<u64> = (0..200).map(|i| 80 + (i * 31) % 400).collect();
    let math: Vec<u64> = (0..200).map(|i| 40 + (i * 17) % 220).collect();
    let chat: Vec<u64> = (0..200).map(|i| 120 + (i * 53) % 600).collect();
    out.insert("router-7b".into(), build_ecdf("router-7b", &router)?);
    out.insert("code-13b".into(), build_ecdf("code-13b", &code)?);
    out.insert("math-13b".into(), build_ecdf("math-13b", &math)?);
    out.insert("chat-34b".into(), build_ecdf("chat-34b", &chat)?);
    Ok(out)
}

fn print_plan(plan: &AppPlan) {
    println!(
        "algorithm {}  seed {}  planned total {:.3} s  ({} candidate stage evaluations)",
        plan.algorithm, plan.seed, plan.total_latency, plan.candidate_evaluations
    );
    for (idx, stage) in plan.stages.iter().enumerate() {
        let entries = stage
            .entries
            .iter()
            .map(|e| format!("{} {}", e.node_id, e.plan.key()))
            .collect::<Vec<_>>()
            .join(", ");
        println!(
            "  stage {}: t {:>8.3} .. {:>8.3}  ({} GPUs busy)  first finisher {:<8}  [{}]",
            idx,
            stage.start_time,
            stage.end_time,
            stage.gpus_used,
            stage.planned_first_finisher.as_deref().unwrap_or("-"),
            entries
        );
    }
}

fn main() -> llmsched::Result<()> {
    let (graph, models, requests) = build_app();
    let topo = node();
    let table = cost_table(&models, &topo);
    let models_by_id: BTreeMap<String, ModelSpec> =
        models.iter().map(|m| (m.id.clone(), m.clone())).collect();

    // The planner sees lengths drawn from each model's output-length eCDF;
    // the seed makes the whole plan reproducible.
    let mut workload = WorkloadState::new(&graph, &models, &requests)?;
    workload.sample_raw_lengths(&graph, &ecdfs()?, 7)?;
    workload.resolve_roots()?;

    let mut per_node: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &requests {
        *per_node.entry(r.node_id.as_str()).or_default() += 1;
    }
    println!("requests per application node: {:?}\n", per_node);

    let inputs = PlannerInputs {
        graph: &graph,
        models: &models_by_id,
        topo: &topo,
        table: &table,
    };
    let opts = PlannerOptions { allow_preemption: true, max_num_seqs: 256, seed: 7 };
    let plan = greedy_search(&inputs, workload, &opts)?;
    print_plan(&plan);

    // The structure to look for: while the router grinds through all 120
    // queries, experts whose inputs are already available share the other
    // GPUs; when a model finishes, the stage ends and the survivors are
    // re-sized onto the freed GPUs.
    Ok(())
}
