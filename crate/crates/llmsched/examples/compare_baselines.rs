//! Compares the greedy planner against the two reference schedulers.
//!
//! The application ensembles three models over the same prompts and then has
//! a judge model merge their answers. Three ways to schedule it:
//!
//! * `max`    — one model at a time, each on the whole node under its
//!              highest-throughput plan (maximum parallelism per model);
//! * `min`    — GPUs split as evenly as possible across all ready models;
//! * `greedy` — stages built by marginal throughput gain per added GPU.
//!
//! The example also disables preemption for the greedy planner as an
//! ablation: freezing a started model's plan until it finishes removes a
//! planning freedom, which usually costs time but can occasionally help
//! because the stage-by-stage search is myopic.
//!
//! Run with: `cargo run --example compare_baselines`

use std::collections::BTreeMap;

use llmsched::baselines::{max_heuristic, min_heuristic};
use llmsched::cost::CostTable;
use llmsched::graph::{AppEdge, AppGraph, AppNode, EdgeMode};
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

fn fixture() -> llmsched::Result<(AppGraph, Vec<ModelSpec>, Vec<RequestSpec>, WorkloadState)> {
    let models = vec![
        model("writer-13b", 40, 5120, 26),
        model("critic-13b", 40, 5120, 26),
        model("facts-7b", 32, 4096, 14),
        model("judge-34b", 48, 7168, 68),
    ];
    let members = ["writer", "critic", "facts"];
    let graph = AppGraph {
        nodes: vec![
            AppNode { id: "writer".into(), model_id: "writer-13b".into(), max_output_tokens: None },
            AppNode { id: "critic".into(), model_id: "critic-13b".into(), max_output_tokens: None },
            AppNode { id: "facts".into(), model_id: "facts-7b".into(), max_output_tokens: None },
            AppNode { id: "judge".into(), model_id: "judge-34b".into(), max_output_tokens: Some(300) },
        ],
        edges: members
            .iter()
            .map(|src| AppEdge {
                src: (*src).into(),
                dst: "judge".into(),
                mode: EdgeMode::Concat,
                overhead_tokens: 12,
            })
            .collect(),
        chain_overhead: BTreeMap::new(),
    };

    let mut requests = Vec::new();
    for i in 0..60u64 {
        for member in members {
            requests.push(RequestSpec {
                id: format!("q{:02}-{}", i, member),
                node_id: member.into(),
                base_input_len: 200 + (i * 83) % 300,
                predecessors: vec![],
                ready: true,
            });
        }
        requests.push(RequestSpec {
            id: format!("q{:02}-judge", i),
            node_id: "judge".into(),
            base_input_len: 60,
            predecessors: members
                .iter()
                .map(|member| Predecessor {
                    request_id: format!("q{:02}-{}", i, member),
                    transfer: LengthTransfer::AddOutputLen,
                })
                .collect(),
            ready: false,
        });
    }

    let mut ecdfs = BTreeMap::new();
    let medium: Vec<u64> = (0..200).map(|i| 60 + (i * 31) % 260).collect();
    let short: Vec<u64> = (0..200).map(|i| 30 + (i * 17) % 90).collect();
    let long: Vec<u64> = (0..200).map(|i| 100 + (i * 53) % 400).collect();
    ecdfs.insert("writer-13b".to_string(), build_ecdf("writer-13b", &medium)?);
    ecdfs.insert("critic-13b".to_string(), build_ecdf("critic-13b", &medium)?);
    ecdfs.insert("facts-7b".to_string(), build_ecdf("facts-7b", &short)?);
    ecdfs.insert("judge-34b".to_string(), build_ecdf("judge-34b", &long)?);

    let mut workload = WorkloadState::new(&graph, &models, &requests)?;
    workload.sample_raw_lengths(&graph, &ecdfs, 11)?;
    workload.resolve_roots()?;
    Ok((graph, models, requests, workload))
}

fn describe(label: &str, plan: &AppPlan, reference: Option<f64>) {
    let speedup = reference
        .map(|t| format!("  ({:.2}x vs max)", t / plan.total_latency))
        .unwrap_or_default();
    println!(
        "{:<22} {:>9.3} s in {} stage(s), {:>5} evaluations{}",
        label,
        plan.total_latency,
        plan.stages.len(),
        plan.candidate_evaluations,
        speedup
    );
    for (idx, stage) in plan.stages.iter().enumerate() {
        let entries = stage
            .entries
            .iter()
            .map(|e| format!("{} {}", e.node_id, e.plan.key()))
            .collect::<Vec<_>>()
            .join(", ");
        println!("    stage {}: {:>8.3} s  [{}]", idx, stage.duration, entries);
    }
}

fn main() -> llmsched::Result<()> {
    let (graph, models, _requests, workload) = fixture()?;
    let topo = GpuTopology {
        num_gpus: 8,
        mem_bytes_per_gpu: 80 * (1u64 << 30),
        nvlink_groups: vec![(0..8).collect()],
        reserved_mem_fraction: 0.10,
    };
    let table = cost_table(&models, &topo);
    let models_by_id: BTreeMap<String, ModelSpec> =
        models.iter().map(|m| (m.id.clone(), m.clone())).collect();
    let inputs = PlannerInputs {
        graph: &graph,
        models: &models_by_id,
        topo: &topo,
        table: &table,
    };
    let opts = PlannerOptions { allow_preemption: true, max_num_seqs: 256, seed: 11 };

    let max_plan = max_heuristic(&inputs, workload.clone(), &opts)?;
    let min_plan = min_heuristic(&inputs, workload.clone(), &opts)?;
    let greedy_plan = greedy_search(&inputs, workload.clone(), &opts)?;
    let frozen = PlannerOptions { allow_preemption: false, ..opts };
    let greedy_frozen = greedy_search(&inputs, workload, &frozen)?;

    let reference = max_plan.total_latency;
    describe("max (one at a time)", &max_plan, None);
    describe("min (even split)", &min_plan, Some(reference));
    describe("greedy", &greedy_plan, Some(reference));
    describe("greedy, no preemption", &greedy_frozen, Some(reference));

    assert!(greedy_plan.total_latency <= max_plan.total_latency + 1e-9);
    assert!(greedy_plan.total_latency <= min_plan.total_latency + 1e-9);
    println!("\ngreedy beats or ties both references on this fixture (asserted)");
    // The preemption ablation is fixture-dependent: re-planning freedom
    // usually helps, but the stage search is myopic (it maximizes each
    // stage's throughput, not the critical path), so freezing started
    // models can occasionally win, as it does here.
    Ok(())
}
