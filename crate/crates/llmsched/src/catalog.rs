//! Static descriptions of models and of the GPU node, plus enumeration of the
//! parallelism plans a model can run under.
//!
//! An execution plan `(dp, tp)` runs `dp` data-parallel replicas of a model,
//! each sharded over `tp` GPUs with tensor parallelism, occupying `dp * tp`
//! GPUs in total.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Static description of one LLM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub id: String,
    /// Number of transformer layers.
    pub num_layers: u64,
    /// Hidden dimension.
    pub hidden_dim: u64,
    /// Sum of the weight-matrix sizes of the matrix multiplications in one
    /// layer, in elements. This is the per-token FLOP coefficient of a layer.
    pub matmul_weight_sum: f64,
    /// Longest supported sequence (prompt plus output), in tokens.
    pub max_seq_len: u64,
    /// Total size of the model weights, in bytes.
    pub weight_bytes: u64,
    /// KV-cache bytes one token occupies in one layer (sum over K and V).
    pub kv_bytes_per_token_per_layer: u64,
    /// Tensor-parallel degrees the model supports. Each must divide
    /// `hidden_dim`.
    pub allowed_tp: BTreeSet<u64>,
}

impl ModelSpec {
    /// Checks the structural invariants of the spec.
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Config("model id must not be empty".into()));
        }
        if self.num_layers == 0 {
            return Err(Error::Config(format!(
                "model '{}': num_layers must be >= 1",
                self.id
            )));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Config(format!(
                "model '{}': hidden_dim must be >= 1",
                self.id
            )));
        }
        if !(self.matmul_weight_sum > 0.0) {
            return Err(Error::Config(format!(
                "model '{}': matmul_weight_sum must be > 0",
                self.id
            )));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Config(format!(
                "model '{}': max_seq_len must be >= 1",
                self.id
            )));
        }
        if self.weight_bytes == 0 {
            return Err(Error::Config(format!(
                "model '{}': weight_bytes must be > 0",
                self.id
            )));
        }
        if self.allowed_tp.is_empty() {
            return Err(Error::Config(format!(
                "model '{}': allowed_tp must not be empty",
                self.id
            )));
        }
        for &tp in &self.allowed_tp {
            if tp == 0 || self.hidden_dim % tp != 0 {
                return Err(Error::Config(format!(
                    "model '{}': tp {} does not divide hidden_dim {}",
                    self.id, tp, self.hidden_dim
                )));
            }
        }
        Ok(())
    }

    /// KV-cache bytes one token occupies across all layers (unsharded).
    pub fn kv_bytes_per_token(&self) -> u64 {
        self.num_layers * self.kv_bytes_per_token_per_layer
    }
}

fn default_reserved_mem_fraction() -> f64 {
    0.10
}

/// One multi-GPU node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuTopology {
    pub num_gpus: usize,
    pub mem_bytes_per_gpu: u64,
    /// Disjoint groups of GPUs connected pairwise by NVLink. The groups must
    /// cover all GPU indices `0..num_gpus`.
    pub nvlink_groups: Vec<Vec<usize>>,
    /// Fraction of each GPU's memory reserved for activations and runtime
    /// overhead; the remainder is usable for weights and KV cache.
    #[serde(default = "default_reserved_mem_fraction")]
    pub reserved_mem_fraction: f64,
}

impl GpuTopology {
    pub fn validate(&self) -> Result<()> {
        if self.num_gpus == 0 {
            return Err(Error::Config("num_gpus must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.reserved_mem_fraction) {
            return Err(Error::Config(format!(
                "reserved_mem_fraction {} must be in [0, 1)",
                self.reserved_mem_fraction
            )));
        }
        let mut seen = vec![false; self.num_gpus];
        for group in &self.nvlink_groups {
            if group.is_empty() {
                return Err(Error::Config("nvlink_groups must not contain empty groups".into()));
            }
            for &g in group {
                if g >= self.num_gpus {
                    return Err(Error::Config(format!(
                        "nvlink group member {} out of range (num_gpus {})",
                        g, self.num_gpus
                    )));
                }
                if seen[g] {
                    return Err(Error::Config(format!(
                        "gpu {} appears in more than one nvlink group",
                        g
                    )));
                }
                seen[g] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|covered| !covered) {
            return Err(Error::Config(format!(
                "gpu {} is not covered by any nvlink group",
                missing
            )));
        }
        Ok(())
    }

    /// Per-GPU memory usable for weights and KV cache, after the activation
    /// reserve is subtracted.
    pub fn usable_mem_bytes_per_gpu(&self) -> f64 {
        self.mem_bytes_per_gpu as f64 * (1.0 - self.reserved_mem_fraction)
    }
}

/// Parallelism plan: `dp` replicas, each tensor-sharded over `tp` GPUs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub dp: u64,
    pub tp: u64,
}

impl ExecutionPlan {
    pub fn new(dp: u64, tp: u64) -> Self {
        ExecutionPlan { dp, tp }
    }

    pub fn gpus_required(&self) -> u64 {
        self.dp * self.tp
    }

    /// Canonical string form, used e.g. in loading-time table keys.
    pub fn key(&self) -> String {
        format!("dp{}tp{}", self.dp, self.tp)
    }
}

impl std::fmt::Display for ExecutionPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(dp={}, tp={})", self.dp, self.tp)
    }
}

/// Whether `plan` can run `model` on `topo`: the tp degree must be supported,
/// enough GPUs must exist, and each GPU must hold its weight shard plus the KV
/// cache of one maximum-length sequence within the usable memory.
pub fn plan_is_valid(model: &ModelSpec, plan: ExecutionPlan, topo: &GpuTopology) -> bool {
    if plan.dp == 0 || !model.allowed_tp.contains(&plan.tp) {
        return false;
    }
    if plan.gpus_required() > topo.num_gpus as u64 {
        return false;
    }
    let tp = plan.tp as f64;
    let weights_per_gpu = model.weight_bytes as f64 / tp;
    let kv_one_seq_per_gpu = (model.max_seq_len * model.kv_bytes_per_token()) as f64 / tp;
    weights_per_gpu + kv_one_seq_per_gpu <= topo.usable_mem_bytes_per_gpu()
}

/// All valid plans for `model` on `topo`, ordered by ascending GPU footprint
/// and then by ascending tp, so enumeration order is deterministic.
pub fn enumerate_valid_plans(model: &ModelSpec, topo: &GpuTopology) -> Vec<ExecutionPlan> {
    let n = topo.num_gpus as u64;
    let mut plans = Vec::new();
    for &tp in &model.allowed_tp {
        if tp == 0 || tp > n {
            continue;
        }
        for dp in 1..=(n / tp) {
            let plan = ExecutionPlan::new(dp, tp);
            if plan_is_valid(model, plan, topo) {
                plans.push(plan);
            }
        }
    }
    plans.sort_by_key(|p| (p.gpus_required(), p.tp));
    plans
}
