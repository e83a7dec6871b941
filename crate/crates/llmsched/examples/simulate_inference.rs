//! Simulates one model serving a batch of requests, iteration by iteration.
//!
//! The simulator mirrors a continuous-batching inference engine: requests
//! are admitted FCFS while KV-cache and sequence-count limits allow, a
//! prefill iteration processes whole prompts (and yields each request's
//! first token), and each decode iteration grows every running request by
//! one token. When the KV cache would overflow mid-decode, the most recently
//! admitted request is preempted, requeued, and later re-prefilled with its
//! already-generated prefix (recompute-style preemption).
//!
//! Run with: `cargo run --example simulate_inference`

use std::collections::BTreeMap;

use llmsched::cost::CostTable;
use llmsched::graph::{AppGraph, AppNode};
use llmsched::sim::SimOptions;
use llmsched::{
    simulate_model, EngineConfig, ExecutionPlan, IterationKind, ModelSpec, PhaseKind,
    RequestSpec, WorkloadState,
};

fn model() -> ModelSpec {
    ModelSpec {
        id: "chat-13b".into(),
        num_layers: 40,
        hidden_dim: 5120,
        matmul_weight_sum: 3.2e8,
        max_seq_len: 4096,
        weight_bytes: 26_000_000_000,
        kv_bytes_per_token_per_layer: 20_480,
        allowed_tp: [1, 2, 4, 8].into_iter().collect(),
    }
}

/// Hand-written cost table (normally produced by fitting profiled samples).
fn table() -> CostTable {
    let mut t = CostTable::new();
    for tp in [1u64, 2, 4, 8] {
        for bucket in [1u64, 64] {
            t.set_phase("chat-13b", tp, PhaseKind::Comp, bucket, 1.0 / (120e12 * tp as f64), 0.004);
            t.set_phase("chat-13b", tp, PhaseKind::Prep, bucket, 2.0e-8, 0.001);
            t.set_phase("chat-13b", tp, PhaseKind::Samp, bucket, 5.0e-8, 0.0005);
        }
    }
    t
}

fn workload(graph: &AppGraph, n: usize) -> llmsched::Result<WorkloadState> {
    let specs: Vec<RequestSpec> = (0..n)
        .map(|i| RequestSpec {
            id: format!("req-{:03}", i),
            node_id: "svc".into(),
            base_input_len: 200 + (i as u64 * 53) % 400,
            predecessors: vec![],
            ready: true,
        })
        .collect();
    let mut w = WorkloadState::new(graph, &[model()], &specs)?;
    for (i, spec) in specs.iter().enumerate() {
        w.set_raw_output_length(&spec.id, 40 + (i as u64 * 29) % 120)?;
    }
    w.resolve_roots()?;
    Ok(w)
}

fn run(plan: ExecutionPlan, engine: EngineConfig) -> llmsched::Result<()> {
    let graph = AppGraph {
        nodes: vec![AppNode { id: "svc".into(), model_id: "chat-13b".into(), max_output_tokens: None }],
        edges: vec![],
        chain_overhead: BTreeMap::new(),
    };
    let mut w = workload(&graph, 24)?;
    let result = simulate_model(
        &model(),
        plan,
        "svc",
        &mut w,
        &graph,
        &table(),
        &engine,
        &SimOptions::default(),
    )?;

    println!(
        "{} on {} (kv capacity {} tokens, max {} running)",
        "24 requests",
        plan.key(),
        engine.kv_capacity_tokens,
        engine.max_num_seqs
    );
    println!("  first iterations:");
    println!(
        "  {:>9}  {:>8}  {:>3}  {:>5}  {:>6}  {:>10}  {:>8}",
        "t_start", "kind", "B", "s", "S", "FLOPs", "latency"
    );
    for record in result.iterations.iter().take(6) {
        println!(
            "  {:>9.4}  {:>8}  {:>3}  {:>5}  {:>6}  {:>10.3e}  {:>8.4}",
            record.start,
            record.descriptor.kind.as_str(),
            record.descriptor.batch,
            record.descriptor.max_len,
            record.descriptor.total_len,
            record.flops,
            record.latency
        );
    }
    let prefills = result
        .iterations
        .iter()
        .filter(|r| r.descriptor.kind == IterationKind::Prefill)
        .count();
    let decodes = result.iterations.len() - prefills;
    println!(
        "  {} prefill + {} decode iterations, {:.3e} FLOPs total",
        prefills, decodes, result.total_flops
    );
    println!(
        "  all requests finished at t = {:.4} s\n",
        result.completion.expect("workload ran to completion")
    );
    Ok(())
}

fn main() -> llmsched::Result<()> {
    // Ample memory: everything is admitted into one big batch. With two
    // data-parallel replicas, arrivals round-robin across them.
    run(
        ExecutionPlan::new(1, 2),
        EngineConfig { max_num_seqs: 256, kv_capacity_tokens: 200_000 },
    )?;
    run(
        ExecutionPlan::new(2, 1),
        EngineConfig { max_num_seqs: 256, kv_capacity_tokens: 100_000 },
    )?;

    // Tight memory: admission stalls and decodes preempt the most recently
    // admitted request when the KV cache would overflow. The work still
    // completes, just later.
    run(
        ExecutionPlan::new(1, 2),
        EngineConfig { max_num_seqs: 256, kv_capacity_tokens: 4_000 },
    )?;

    // Tight sequence limit: requests queue behind the first max_num_seqs.
    run(
        ExecutionPlan::new(1, 2),
        EngineConfig { max_num_seqs: 6, kv_capacity_tokens: 200_000 },
    )?;
    Ok(())
}
