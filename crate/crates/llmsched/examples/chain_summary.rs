//! Chained summarization: one model invoked repeatedly over its own output.
//!
//! A long document is split into chunks; each summarization call reads the
//! next chunk together with the summary produced so far, so call k+1 cannot
//! start (or even know its prompt length) before call k finishes. In the
//! application graph this is a self-loop on the summarizer node;
//! `fuse_self_loops` folds the loop into the node, keeping its prompt
//! overhead, and the chain itself is expressed as predecessor-linked
//! requests on that single node.
//!
//! The example first walks one chain by hand to show the length/readiness
//! arithmetic, then plans a batch of documents with the greedy search.
//!
//! Run with: `cargo run --example chain_summary`

use std::collections::BTreeMap;

use llmsched::cost::CostTable;
use llmsched::graph::{AppEdge, AppGraph, AppNode, EdgeMode};
use llmsched::lengths::OutputLengthEcdf;
use llmsched::planner::PlannerInputs;
use llmsched::workload::Predecessor;
use llmsched::{
    build_ecdf, enumerate_valid_plans, greedy_search, GpuTopology, LengthTransfer, ModelSpec,
    PhaseKind, PlannerOptions, RequestSpec, WorkloadState,
};

const DOCS: usize = 8;
const CHUNKS: usize = 5;
const CHUNK_TOKENS: u64 = 1200;
const CHAIN_OVERHEAD: u64 = 32; // prompt template around the carried summary
const REPORT_OVERHEAD: u64 = 16;

fn model(id: &str, layers: u64, hidden: u64, weight_gb: u64) -> ModelSpec {
    ModelSpec {
        id: id.into(),
        num_layers: layers,
        hidden_dim: hidden,
        matmul_weight_sum: (weight_gb as f64) * 1.0e9 / 2.0 / layers as f64,
        max_seq_len: 8192,
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

/// Summarizer with a self-loop (chunk k+1 consumes the summary of chunk k)
/// feeding an analyst that only sees each document's final summary.
fn build_graph() -> AppGraph {
    AppGraph {
        nodes: vec![
            AppNode { id: "summarize".into(), model_id: "summarizer-13b".into(), max_output_tokens: Some(220) },
            AppNode { id: "report".into(), model_id: "analyst-34b".into(), max_output_tokens: None },
        ],
        edges: vec![
            AppEdge {
                src: "summarize".into(),
                dst: "summarize".into(),
                mode: EdgeMode::Concat,
                overhead_tokens: CHAIN_OVERHEAD,
            },
            AppEdge {
                src: "summarize".into(),
                dst: "report".into(),
                mode: EdgeMode::FilterFinal,
                overhead_tokens: REPORT_OVERHEAD,
            },
        ],
        chain_overhead: BTreeMap::new(),
    }
}

/// CHUNKS chained summarization requests per document plus one report
/// request hanging off the last chunk.
fn build_requests() -> Vec<RequestSpec> {
    let mut specs = Vec::new();
    for d in 0..DOCS {
        for k in 0..CHUNKS {
            let predecessors = if k == 0 {
                vec![]
            } else {
                vec![Predecessor {
                    request_id: format!("doc{}-c{}", d, k - 1),
                    transfer: LengthTransfer::AddOutputLen,
                }]
            };
            specs.push(RequestSpec {
                id: format!("doc{}-c{}", d, k),
                node_id: "summarize".into(),
                base_input_len: CHUNK_TOKENS + (d as u64 * 37) % 150,
                predecessors,
                ready: k == 0,
            });
        }
        specs.push(RequestSpec {
            id: format!("doc{}-report", d),
            node_id: "report".into(),
            base_input_len: 400,
            predecessors: vec![Predecessor {
                request_id: format!("doc{}-c{}", d, CHUNKS - 1),
                transfer: LengthTransfer::AddOutputLen,
            }],
            ready: false,
        });
    }
    specs
}

fn ecdfs() -> llmsched::Result<BTreeMap<String, OutputLengthEcdf>> {
    let summaries: Vec<u64> = (0..240).map(|i| 90 + (i * 23) % 160).collect();
    let reports: Vec<u64> = (0..240).map(|i| 200 + (i * 41) % 400).collect();
    let mut out = BTreeMap::new();
    out.insert("summarizer-13b".into(), build_ecdf("summarizer-13b", &summaries)?);
    out.insert("analyst-34b".into(), build_ecdf("analyst-34b", &reports)?);
    Ok(out)
}

/// Walks one chain with hand-picked output lengths, printing how each
/// completion fixes the next request's prompt length and ready time.
fn walk_one_chain(graph: &AppGraph, models: &[ModelSpec]) -> llmsched::Result<()> {
    let specs: Vec<RequestSpec> = build_requests()
        .into_iter()
        .filter(|r| r.id.starts_with("doc0-"))
        .collect();
    let mut w = WorkloadState::new(graph, models, &specs)?;
    let outputs = [140u64, 155, 170, 160, 180, 320]; // 5 chunks + report
    for (spec, &raw) in specs.iter().zip(&outputs) {
        w.set_raw_output_length(&spec.id, raw)?;
    }
    w.resolve_roots()?;

    println!("one document, {} chunks, chain overhead {} tokens:", CHUNKS, CHAIN_OVERHEAD);
    let base = specs[0].base_input_len;
    let mut clock = 0.0;
    for k in 0..CHUNKS {
        let id = format!("doc0-c{}", k);
        let req = w.request_by_id(&id).unwrap().clone();
        let input = req.input_len.expect("resolved by predecessor completion");
        let detail = if k == 0 {
            format!("{} (chunk only)", input)
        } else {
            let prev_out = outputs[k - 1];
            format!("{} = {} + {} + {}", input, base, prev_out, CHAIN_OVERHEAD)
        };
        println!(
            "  {}: prompt {:<22} ready at {:>4.1} s  summary {} tokens",
            id,
            detail,
            req.ready_time.unwrap(),
            req.output_len.unwrap()
        );
        if k > 0 {
            assert_eq!(input, base + outputs[k - 1] + CHAIN_OVERHEAD);
        }
        clock += 3.0; // pretend each call takes 3 s
        w.derive_request_lengths(graph, &id, outputs[k], clock)?;
    }
    let report = w.request_by_id("doc0-report").unwrap();
    println!(
        "  doc0-report: prompt {} = 400 + {} + {}   ready at {:>4.1} s (final summary only)",
        report.input_len.unwrap(),
        outputs[CHUNKS - 1],
        REPORT_OVERHEAD,
        report.ready_time.unwrap()
    );
    assert_eq!(report.input_len, Some(400 + outputs[CHUNKS - 1] + REPORT_OVERHEAD));
    Ok(())
}

fn main() -> llmsched::Result<()> {
    let graph = build_graph().fuse_self_loops()?;
    assert!(graph.edges.iter().all(|e| e.src != e.dst));
    assert_eq!(graph.chain_overhead.get("summarize"), Some(&CHAIN_OVERHEAD));
    println!(
        "self-loop fused: {} edge(s) left, chain overhead {:?}\n",
        graph.edges.len(),
        graph.chain_overhead
    );

    let models = vec![model("summarizer-13b", 40, 5120, 26), model("analyst-34b", 48, 7168, 68)];
    walk_one_chain(&graph, &models)?;

    // Now the full batch: DOCS chains limit the summarizer's batch to DOCS
    // concurrent requests (one live chunk per document), so throwing the
    // whole node at it is wasteful. The greedy planner sizes it smaller and
    // brings the analyst up as final summaries start arriving.
    let requests = build_requests();
    let topo = node();
    let table = cost_table(&models, &topo);
    let models_by_id: BTreeMap<String, ModelSpec> =
        models.iter().map(|m| (m.id.clone(), m.clone())).collect();

    let mut workload = WorkloadState::new(&graph, &models, &requests)?;
    workload.sample_raw_lengths(&graph, &ecdfs()?, 13)?;
    workload.resolve_roots()?;

    let inputs = PlannerInputs {
        graph: &graph,
        models: &models_by_id,
        topo: &topo,
        table: &table,
    };
    let opts = PlannerOptions { allow_preemption: true, max_num_seqs: 256, seed: 13 };
    let plan = greedy_search(&inputs, workload, &opts)?;

    println!(
        "\nplanned {} documents x {} chunks (+{} reports): total {:.3} s in {} stage(s)",
        DOCS,
        CHUNKS,
        DOCS,
        plan.total_latency,
        plan.stages.len()
    );
    for (idx, stage) in plan.stages.iter().enumerate() {
        let entries = stage
            .entries
            .iter()
            .map(|e| format!("{} {}", e.node_id, e.plan.key()))
            .collect::<Vec<_>>()
            .join(", ");
        println!(
            "  stage {}: t {:>7.3} .. {:>7.3}  ({} GPUs)  [{}]",
            idx, stage.start_time, stage.end_time, stage.gpus_used, entries
        );
    }
    Ok(())
}
