//! Lists every execution plan a model can run under on a given node.
//!
//! A plan `(dp, tp)` runs `dp` data-parallel replicas, each sharded over
//! `tp` GPUs by tensor parallelism, so it occupies `dp * tp` GPUs. A plan is
//! valid when the model supports the `tp` degree, the GPUs exist, and each
//! GPU still has room for its weight shard plus at least some KV cache.
//!
//! Run with: `cargo run --example enumerate_plans`

use llmsched::sim::DEFAULT_MAX_NUM_SEQS;
use llmsched::{enumerate_valid_plans, EngineConfig, GpuTopology, ModelSpec};

fn main() -> llmsched::Result<()> {
    // One 8-GPU node, 80 GiB per GPU, all GPUs in a single NVLink group.
    // 10% of each GPU is reserved for activations and runtime overhead.
    let node = GpuTopology {
        num_gpus: 8,
        mem_bytes_per_gpu: 80 * (1u64 << 30),
        nvlink_groups: vec![(0..8).collect()],
        reserved_mem_fraction: 0.10,
    };

    // A mid-sized chat model (fp16 numbers in the 13B-parameter ballpark).
    let model = ModelSpec {
        id: "chat-13b".into(),
        num_layers: 40,
        hidden_dim: 5120,
        matmul_weight_sum: 3.2e8,
        max_seq_len: 4096,
        weight_bytes: 26_000_000_000,
        kv_bytes_per_token_per_layer: 20_480,
        allowed_tp: [1, 2, 4, 8].into_iter().collect(),
    };
    model.validate()?;
    node.validate()?;

    println!(
        "valid execution plans for '{}' on a {}-GPU node ({} GiB each):\n",
        model.id,
        node.num_gpus,
        node.mem_bytes_per_gpu >> 30
    );
    println!(
        "{:>8}  {:>4}  {:>4}  {:>6}  {:>16}  {:>18}",
        "plan", "dp", "tp", "gpus", "weight/GPU (GiB)", "KV capacity (tok)"
    );

    for plan in enumerate_valid_plans(&model, &node) {
        let weight_per_gpu = model.weight_bytes as f64 / plan.tp as f64 / (1u64 << 30) as f64;
        // The engine limits derived from the same arithmetic the simulator
        // uses: whatever memory the weight shard leaves becomes KV cache.
        let engine = EngineConfig::derive(&model, plan, &node, DEFAULT_MAX_NUM_SEQS)?;
        println!(
            "{:>8}  {:>4}  {:>4}  {:>6}  {:>16.1}  {:>18}",
            plan.key(),
            plan.dp,
            plan.tp,
            plan.gpus_required(),
            weight_per_gpu,
            engine.kv_capacity_tokens
        );
    }

    // A model too large for a single GPU shows why tp matters: plans with
    // small tp disappear because the weight shard alone overflows the GPU.
    let big = ModelSpec {
        id: "dense-70b".into(),
        num_layers: 80,
        hidden_dim: 8192,
        matmul_weight_sum: 8.5e8,
        max_seq_len: 4096,
        weight_bytes: 140_000_000_000,
        kv_bytes_per_token_per_layer: 32_768,
        allowed_tp: [1, 2, 4, 8].into_iter().collect(),
    };
    let plans = enumerate_valid_plans(&big, &node);
    println!(
        "\n'{}' ({} GiB of weights) only fits with enough tensor parallelism:",
        big.id,
        big.weight_bytes >> 30
    );
    for plan in &plans {
        println!("  {}  ({} GPUs)", plan.key(), plan.gpus_required());
    }
    Ok(())
}
