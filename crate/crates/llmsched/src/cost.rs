//! Analytical FLOP counts and the fitted per-iteration latency model.
//!
//! One engine iteration either prefills a batch of prompts or decodes one
//! token for every running request. Its wall time is modeled as the sum of
//! three affine phases, each with batch-size-dependent coefficients:
//!
//! ```text
//! t = a_comp[B] * FLOPs + b_comp[B]     (forward computation)
//!   + a_prep[B] * (B*s) + b_prep[B]     (input preparation, padded tokens)
//!   + a_samp[B] * S     + b_samp[B]     (sampling, unpadded tokens)
//! ```
//!
//! where `B` is the batch size, `s` the longest (padded) sequence in the
//! batch and `S` the total unpadded length. The coefficients are fitted per
//! model, per tensor-parallel degree and per profiled batch-size bucket by
//! least squares.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::catalog::{ExecutionPlan, GpuTopology, ModelSpec};
use crate::error::{Error, Result};

/// The three phases of one engine iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseKind {
    Comp,
    Prep,
    Samp,
}

impl PhaseKind {
    pub const ALL: [PhaseKind; 3] = [PhaseKind::Comp, PhaseKind::Prep, PhaseKind::Samp];

    pub fn as_str(&self) -> &'static str {
        match self {
            PhaseKind::Comp => "comp",
            PhaseKind::Prep => "prep",
            PhaseKind::Samp => "samp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IterationKind {
    Prefill,
    Decode,
}

impl IterationKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            IterationKind::Prefill => "prefill",
            IterationKind::Decode => "decode",
        }
    }
}

/// Shape of one simulated iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationDescriptor {
    pub kind: IterationKind,
    /// Requests in the batch.
    pub batch: u64,
    /// Longest request length in the batch, i.e. the padded length.
    pub max_len: u64,
    /// Total unpadded length over the batch.
    pub total_len: u64,
}

/// FLOPs of a whole-prompt prefill iteration:
/// `L * (c*B*s + 2*B*h*s^2 / tp)`.
pub fn flops_prefill(model: &ModelSpec, it: &IterationDescriptor, tp: u64) -> f64 {
    let l = model.num_layers as f64;
    let c = model.matmul_weight_sum;
    let b = it.batch as f64;
    let s = it.max_len as f64;
    let h = model.hidden_dim as f64;
    l * (c * b * s + 2.0 * b * h * s * s / tp as f64)
}

/// FLOPs of a single-token decode iteration:
/// `L * (c*B + 2*h*S / tp)`.
pub fn flops_decode(model: &ModelSpec, it: &IterationDescriptor, tp: u64) -> f64 {
    let l = model.num_layers as f64;
    let c = model.matmul_weight_sum;
    let b = it.batch as f64;
    let h = model.hidden_dim as f64;
    let s_total = it.total_len as f64;
    l * (c * b + 2.0 * h * s_total / tp as f64)
}

/// FLOPs of `it`, dispatched on the iteration kind.
pub fn flops_of(model: &ModelSpec, it: &IterationDescriptor, tp: u64) -> f64 {
    match it.kind {
        IterationKind::Prefill => flops_prefill(model, it, tp),
        IterationKind::Decode => flops_decode(model, it, tp),
    }
}

/// Affine latency coefficients for one phase, per profiled batch-size bucket.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseCoefficients {
    /// Batch-size bucket -> (a, b) with `latency ~= a * x + b`.
    pub buckets: BTreeMap<u64, (f64, f64)>,
}

impl PhaseCoefficients {
    /// Evaluates `a*x + b` at batch size `batch`.
    ///
    /// Between two profiled buckets the two bucket evaluations are linearly
    /// interpolated in `batch`; outside the profiled range the nearest bucket
    /// is used as-is.
    pub fn evaluate(&self, batch: u64, x: f64) -> Result<f64> {
        if self.buckets.is_empty() {
            return Err(Error::Config("phase has no profiled batch buckets".into()));
        }
        if let Some(&(a, b)) = self.buckets.get(&batch) {
            return Ok(a * x + b);
        }
        let below = self.buckets.range(..batch).next_back();
        let above = self.buckets.range(batch..).next();
        let eval = |(a, b): (f64, f64)| a * x + b;
        match (below, above) {
            (Some((&b_lo, &c_lo)), Some((&b_hi, &c_hi))) => {
                let w = (batch - b_lo) as f64 / (b_hi - b_lo) as f64;
                Ok((1.0 - w) * eval(c_lo) + w * eval(c_hi))
            }
            (Some((_, &c_lo)), None) => Ok(eval(c_lo)),
            (None, Some((_, &c_hi))) => Ok(eval(c_hi)),
            (None, None) => unreachable!("non-empty bucket map"),
        }
    }
}

/// Coefficients of the three phases for one (model, tp) pair.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTriple {
    pub comp: PhaseCoefficients,
    pub prep: PhaseCoefficients,
    pub samp: PhaseCoefficients,
}

impl PhaseTriple {
    pub fn phase(&self, kind: PhaseKind) -> &PhaseCoefficients {
        match kind {
            PhaseKind::Comp => &self.comp,
            PhaseKind::Prep => &self.prep,
            PhaseKind::Samp => &self.samp,
        }
    }

    pub fn phase_mut(&mut self, kind: PhaseKind) -> &mut PhaseCoefficients {
        match kind {
            PhaseKind::Comp => &mut self.comp,
            PhaseKind::Prep => &mut self.prep,
            PhaseKind::Samp => &mut self.samp,
        }
    }
}

/// Fitted latency coefficients and measured loading times for every model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    /// model id -> tp -> phase coefficients.
    pub coefficients: BTreeMap<String, BTreeMap<u64, PhaseTriple>>,
    /// "model_id:dpXtpY" -> seconds to load the model under that plan.
    pub loading_time: BTreeMap<String, f64>,
}

impl CostTable {
    pub fn new() -> Self {
        CostTable::default()
    }

    /// Inserts coefficients for one (model, tp, phase, batch-bucket).
    pub fn set_phase(&mut self, model_id: &str, tp: u64, kind: PhaseKind, bucket: u64, a: f64, b: f64) {
        self.coefficients
            .entry(model_id.to_string())
            .or_default()
            .entry(tp)
            .or_default()
            .phase_mut(kind)
            .buckets
            .insert(bucket, (a, b));
    }

    pub fn set_loading(&mut self, model_id: &str, plan: ExecutionPlan, seconds: f64) {
        self.loading_time
            .insert(format!("{}:{}", model_id, plan.key()), seconds);
    }

    pub fn triple(&self, model_id: &str, tp: u64) -> Result<&PhaseTriple> {
        self.coefficients
            .get(model_id)
            .and_then(|per_tp| per_tp.get(&tp))
            .ok_or_else(|| {
                Error::Config(format!(
                    "cost table has no coefficients for model '{}' at tp {}",
                    model_id, tp
                ))
            })
    }

    /// Seconds to load `model_id` under `plan`.
    pub fn loading_time(&self, model_id: &str, plan: ExecutionPlan) -> Result<f64> {
        let key = format!("{}:{}", model_id, plan.key());
        self.loading_time
            .get(&key)
            .copied()
            .ok_or_else(|| Error::Config(format!("cost table has no loading_time entry '{}'", key)))
    }

    /// Checks that every enumerable plan of every model has both latency
    /// coefficients and a loading time.
    pub fn validate_coverage(&self, models: &[ModelSpec], topo: &GpuTopology) -> Result<()> {
        for model in models {
            for plan in crate::catalog::enumerate_valid_plans(model, topo) {
                self.triple(&model.id, plan.tp)?;
                self.loading_time(&model.id, plan)?;
            }
        }
        Ok(())
    }
}

/// Wall time of one iteration under the fitted model, in seconds.
pub fn iter_latency(
    table: &CostTable,
    model: &ModelSpec,
    tp: u64,
    it: &IterationDescriptor,
) -> Result<f64> {
    let triple = table.triple(&model.id, tp)?;
    let comp = triple.comp.evaluate(it.batch, flops_of(model, it, tp))?;
    let prep = triple
        .prep
        .evaluate(it.batch, (it.batch * it.max_len) as f64)?;
    let samp = triple.samp.evaluate(it.batch, it.total_len as f64)?;
    Ok(comp + prep + samp)
}

/// One row of a profiling run: the measured latency of `phase` at batch size
/// `batch` with phase input `x` (FLOPs, padded tokens or unpadded tokens).
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSample {
    pub model_id: String,
    pub tp: u64,
    pub phase: PhaseKind,
    pub batch: u64,
    pub x: f64,
    pub latency_s: f64,
}

/// One measured model-loading time.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadingSample {
    pub model_id: String,
    pub plan: ExecutionPlan,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FitOptions {
    /// Fraction of samples (by largest absolute residual) to drop per bucket
    /// before refitting. Zero disables trimming.
    pub trim_fraction: f64,
}

/// Least-squares fit of `y = a*x + b` over `points`. Returns `(a, b)`.
fn least_squares(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.0 - mean_x)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    let a = sxy / sxx;
    (a, mean_y - a * mean_x)
}

fn distinct_x(points: &[(f64, f64)]) -> usize {
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    xs.len()
}

/// Fits one bucket, clamping negative slopes to zero (the latency model is
/// non-decreasing in its inputs by construction).
fn fit_bucket(key: &str, points: &[(f64, f64)], opts: FitOptions) -> Result<(f64, f64)> {
    if distinct_x(points) < 2 {
        return Err(Error::Config(format!(
            "profiling bucket {} needs at least 2 samples with distinct x values",
            key
        )));
    }
    let mut kept: Vec<(f64, f64)> = points.to_vec();
    if opts.trim_fraction > 0.0 {
        let (a, b) = least_squares(&kept);
        let drop_n = (opts.trim_fraction * kept.len() as f64).ceil() as usize;
        let mut by_residual: Vec<usize> = (0..kept.len()).collect();
        by_residual.sort_by(|&i, &j| {
            let ri = (kept[i].1 - (a * kept[i].0 + b)).abs();
            let rj = (kept[j].1 - (a * kept[j].0 + b)).abs();
            rj.total_cmp(&ri).then(i.cmp(&j))
        });
        // Drop the worst residuals, but never below 2 distinct x values.
        let mut drop_set = vec![false; kept.len()];
        let mut remaining = kept.clone();
        let mut removed = 0;
        for &idx in &by_residual {
            if removed >= drop_n {
                break;
            }
            drop_set[idx] = true;
            let trial: Vec<(f64, f64)> = kept
                .iter()
                .enumerate()
                .filter(|(i, _)| !drop_set[*i])
                .map(|(_, p)| *p)
                .collect();
            if distinct_x(&trial) < 2 {
                drop_set[idx] = false;
                continue;
            }
            remaining = trial;
            removed += 1;
        }
        kept = remaining;
    }
    let (a, b) = least_squares(&kept);
    if a < 0.0 {
        log::warn!(
            "profiling bucket {}: fitted slope {} is negative, clamping to 0",
            key,
            a
        );
        let mean_y = kept.iter().map(|p| p.1).sum::<f64>() / kept.len() as f64;
        return Ok((0.0, mean_y));
    }
    Ok((a, b))
}

/// Fits per-bucket phase coefficients from profiling samples and folds in
/// measured loading times (averaged per model and plan).
pub fn fit_coefficients(
    samples: &[ProfileSample],
    loading: &[LoadingSample],
    opts: FitOptions,
) -> Result<CostTable> {
    if samples.is_empty() {
        return Err(Error::Config("profiling input contains no samples".into()));
    }
    let mut grouped: BTreeMap<(String, u64, PhaseKind, u64), Vec<(f64, f64)>> = BTreeMap::new();
    for s in samples {
        if s.tp == 0 || s.batch == 0 {
            return Err(Error::Config(format!(
                "profiling sample for model '{}' has tp {} and B {}; both must be >= 1",
                s.model_id, s.tp, s.batch
            )));
        }
        grouped
            .entry((s.model_id.clone(), s.tp, s.phase, s.batch))
            .or_default()
            .push((s.x, s.latency_s));
    }
    let mut table = CostTable::new();
    for ((model_id, tp, phase, bucket), points) in &grouped {
        let key = format!("{}:tp{}:{}:B{}", model_id, tp, phase.as_str(), bucket);
        let (a, b) = fit_bucket(&key, points, opts)?;
        table.set_phase(model_id, *tp, *phase, *bucket, a, b);
    }
    let mut load_groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for l in loading {
        load_groups
            .entry(format!("{}:{}", l.model_id, l.plan.key()))
            .or_default()
            .push(l.seconds);
    }
    for (key, seconds) in load_groups {
        let mean = seconds.iter().sum::<f64>() / seconds.len() as f64;
        table.loading_time.insert(key, mean);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn model() -> ModelSpec {
        ModelSpec {
            id: "m".into(),
            num_layers: 2,
            hidden_dim: 8,
            matmul_weight_sum: 10.0,
            max_seq_len: 64,
            weight_bytes: 1 << 20,
            kv_bytes_per_token_per_layer: 16,
            allowed_tp: [1, 2].into_iter().collect(),
        }
    }

    #[test]
    fn prefill_flops_match_the_hand_computed_value() {
        // L=2, c=10, B=3, s=4, h=8, tp=2:
        //   2 * (10*3*4 + 2*3*8*16/2) = 2 * (120 + 384) = 1008
        let it = IterationDescriptor {
            kind: IterationKind::Prefill,
            batch: 3,
            max_len: 4,
            total_len: 10,
        };
        assert_eq!(flops_prefill(&model(), &it, 2), 1008.0);
    }

    #[test]
    fn decode_flops_match_the_hand_computed_value() {
        // L=2, c=10, B=3, h=8, S=12, tp=2:
        //   2 * (10*3 + 2*8*12/2) = 2 * (30 + 96) = 252
        let it = IterationDescriptor {
            kind: IterationKind::Decode,
            batch: 3,
            max_len: 4,
            total_len: 12,
        };
        assert_eq!(flops_decode(&model(), &it, 2), 252.0);
    }

    #[test]
    fn empty_batch_costs_nothing() {
        let it = IterationDescriptor {
            kind: IterationKind::Prefill,
            batch: 0,
            max_len: 0,
            total_len: 0,
        };
        assert_eq!(flops_prefill(&model(), &it, 1), 0.0);
        let it = IterationDescriptor {
            kind: IterationKind::Decode,
            batch: 0,
            max_len: 0,
            total_len: 0,
        };
        assert_eq!(flops_decode(&model(), &it, 1), 0.0);
    }

    fn flat_table(a: f64, b: f64) -> CostTable {
        let mut t = CostTable::new();
        for phase in PhaseKind::ALL {
            t.set_phase("m", 1, phase, 1, a, b);
        }
        t
    }

    #[test]
    fn latency_sums_the_three_phases() {
        // One bucket with a=0, b=1 per phase: every iteration takes 3 s.
        let table = flat_table(0.0, 1.0);
        let it = IterationDescriptor {
            kind: IterationKind::Decode,
            batch: 1,
            max_len: 5,
            total_len: 5,
        };
        assert_eq!(iter_latency(&table, &model(), 1, &it).unwrap(), 3.0);
    }

    #[test]
    fn bucket_midpoint_interpolates_the_two_evaluations() {
        let mut coeffs = PhaseCoefficients::default();
        coeffs.buckets.insert(2, (0.0, 1.0));
        coeffs.buckets.insert(4, (0.0, 3.0));
        assert_eq!(coeffs.evaluate(3, 0.0).unwrap(), 2.0);
        // Outside the profiled range the nearest bucket is used.
        assert_eq!(coeffs.evaluate(1, 0.0).unwrap(), 1.0);
        assert_eq!(coeffs.evaluate(9, 0.0).unwrap(), 3.0);
    }

    #[test]
    fn missing_coefficients_name_the_key() {
        let table = flat_table(0.0, 1.0);
        let it = IterationDescriptor {
            kind: IterationKind::Decode,
            batch: 1,
            max_len: 1,
            total_len: 1,
        };
        let err = iter_latency(&table, &model(), 2, &it).unwrap_err();
        assert!(err.to_string().contains("model 'm' at tp 2"), "{}", err);
    }

    #[test]
    fn loading_time_lookup_uses_the_plan_key() {
        let mut table = CostTable::new();
        table.set_loading("m", ExecutionPlan::new(1, 2), 30.0);
        assert_eq!(table.loading_time("m", ExecutionPlan::new(1, 2)).unwrap(), 30.0);
        let err = table.loading_time("m", ExecutionPlan::new(2, 1)).unwrap_err();
        assert!(err.to_string().contains("m:dp2tp1"), "{}", err);
    }

    #[test]
    fn exact_fit_recovers_the_line() {
        let samples: Vec<ProfileSample> = [(1.0, 2.5), (2.0, 4.5), (3.0, 6.5)]
            .iter()
            .map(|&(x, y)| ProfileSample {
                model_id: "m".into(),
                tp: 1,
                phase: PhaseKind::Comp,
                batch: 8,
                x,
                latency_s: y,
            })
            .collect();
        let table = fit_coefficients(&samples, &[], FitOptions::default()).unwrap();
        let (a, b) = table.coefficients["m"][&1].comp.buckets[&8];
        assert_relative_eq!(a, 2.0, max_relative = 1e-9);
        assert_relative_eq!(b, 0.5, max_relative = 1e-9);
    }

    #[test]
    fn negative_slope_is_clamped_to_zero() {
        let samples: Vec<ProfileSample> = [(1.0, 5.0), (2.0, 4.0), (3.0, 3.0)]
            .iter()
            .map(|&(x, y)| ProfileSample {
                model_id: "m".into(),
                tp: 1,
                phase: PhaseKind::Samp,
                batch: 1,
                x,
                latency_s: y,
            })
            .collect();
        let table = fit_coefficients(&samples, &[], FitOptions::default()).unwrap();
        let (a, b) = table.coefficients["m"][&1].samp.buckets[&1];
        assert_eq!(a, 0.0);
        assert_relative_eq!(b, 4.0, max_relative = 1e-12);
    }

    #[test]
    fn single_x_bucket_is_rejected() {
        let samples: Vec<ProfileSample> = (0..3)
            .map(|_| ProfileSample {
                model_id: "m".into(),
                tp: 1,
                phase: PhaseKind::Comp,
                batch: 4,
                x: 7.0,
                latency_s: 1.0,
            })
            .collect();
        let err = fit_coefficients(&samples, &[], FitOptions::default()).unwrap_err();
        assert!(err.to_string().contains("m:tp1:comp:B4"), "{}", err);
    }

    #[test]
    fn trimming_discards_the_outlier() {
        let mut samples: Vec<ProfileSample> = (1..=100)
            .map(|i| ProfileSample {
                model_id: "m".into(),
                tp: 1,
                phase: PhaseKind::Comp,
                batch: 2,
                x: i as f64,
                latency_s: 3.0 * i as f64 + 1.0,
            })
            .collect();
        samples[50].latency_s += 1000.0;
        let opts = FitOptions { trim_fraction: 0.01 };
        let table = fit_coefficients(&samples, &[], opts).unwrap();
        let (a, b) = table.coefficients["m"][&1].comp.buckets[&2];
        assert_relative_eq!(a, 3.0, max_relative = 1e-9);
        assert_relative_eq!(b, 1.0, max_relative = 1e-6);
    }

    proptest! {
        // With non-negative slopes the latency model is monotone in each of
        // its inputs.
        #[test]
        fn latency_is_monotone_in_the_inputs(
            a in 0.0f64..1e-3,
            b in 0.0f64..1.0,
            batch in 1u64..64,
            len in 1u64..512,
            grow in 1u64..64,
        ) {
            let mut table = CostTable::new();
            for phase in PhaseKind::ALL {
                table.set_phase("m", 1, phase, 1, a, b);
                table.set_phase("m", 1, phase, 64, a, b);
            }
            let m = model();
            let small = IterationDescriptor {
                kind: IterationKind::Decode,
                batch,
                max_len: len,
                total_len: batch * len,
            };
            let large = IterationDescriptor {
                kind: IterationKind::Decode,
                batch,
                max_len: len + grow,
                total_len: batch * (len + grow),
            };
            let t_small = iter_latency(&table, &m, 1, &small).unwrap();
            let t_large = iter_latency(&table, &m, 1, &large).unwrap();
            prop_assert!(t_large >= t_small);
        }
    }
}
