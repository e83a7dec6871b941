//! Output-length prediction from historical traces.
//!
//! Output lengths are drawn from the empirical CDF of previously observed
//! lengths by inverse-transform sampling. The uniform variate for a request
//! comes from a stable 64-bit hash of `(seed, request_id)`, so a sample
//! depends only on the seed and the request id — never on sampling order,
//! simulation order or platform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Empirical CDF over observed output lengths of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputLengthEcdf {
    pub model_id: String,
    /// Observed lengths, sorted ascending (duplicates kept).
    lengths: Vec<u64>,
}

/// Builds the eCDF of `trace`; errors on an empty trace.
pub fn build_ecdf(model_id: &str, trace: &[u64]) -> Result<OutputLengthEcdf> {
    if trace.is_empty() {
        return Err(Error::Config(format!(
            "output-length trace for model '{}' is empty",
            model_id
        )));
    }
    let mut lengths = trace.to_vec();
    lengths.sort_unstable();
    Ok(OutputLengthEcdf {
        model_id: model_id.to_string(),
        lengths,
    })
}

impl OutputLengthEcdf {
    /// Restores an eCDF from already-collected lengths (e.g. a parsed file).
    pub fn from_lengths(model_id: &str, lengths: Vec<u64>) -> Result<Self> {
        build_ecdf(model_id, &lengths)
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn lengths(&self) -> &[u64] {
        &self.lengths
    }

    /// `P(X <= x)`: the fraction of observed lengths that are `<= x`.
    pub fn cdf(&self, x: u64) -> f64 {
        let below = self.lengths.partition_point(|&v| v <= x);
        below as f64 / self.lengths.len() as f64
    }

    /// Smallest observed length whose cumulative probability is `>= u`
    /// (the right-continuous step-function inverse).
    pub fn quantile(&self, u: f64) -> u64 {
        let n = self.lengths.len();
        let idx = ((u * n as f64).ceil() as usize).saturating_sub(1).min(n - 1);
        self.lengths[idx]
    }
}

/// Stable 64-bit hash of `(seed, request_id)`: FNV-1a over the bytes followed
/// by a splitmix64 finalizer for avalanche.
fn hash_request(seed: u64, request_id: &str) -> u64 {
    const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = FNV_OFFSET;
    for b in seed.to_le_bytes() {
        h = (h ^ b as u64).wrapping_mul(FNV_PRIME);
    }
    for &b in request_id.as_bytes() {
        h = (h ^ b as u64).wrapping_mul(FNV_PRIME);
    }
    let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform variate in `[0, 1)` for `(seed, request_id)`.
pub fn unit_variate(seed: u64, request_id: &str) -> f64 {
    // Top 53 bits -> exactly representable dyadic rational in [0, 1).
    (hash_request(seed, request_id) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Samples an output length for one request.
///
/// The raw eCDF draw is truncated by the optional per-application `cap` and
/// by the room the prompt leaves under the model's maximum sequence length,
/// so the result is always servable. Errors if the prompt alone exceeds
/// `l_max`.
pub fn sample_output_length(
    ecdf: &OutputLengthEcdf,
    l_in: u64,
    l_max: u64,
    cap: Option<u64>,
    seed: u64,
    request_id: &str,
) -> Result<u64> {
    if l_in > l_max {
        return Err(Error::Config(format!(
            "request '{}': input length {} exceeds the model's max_seq_len {}",
            request_id, l_in, l_max
        )));
    }
    let raw = ecdf.quantile(unit_variate(seed, request_id));
    Ok(clamp_output_length(raw, l_in, l_max, cap))
}

/// Applies the cap and remaining-context truncation to a raw length draw.
pub fn clamp_output_length(raw: u64, l_in: u64, l_max: u64, cap: Option<u64>) -> u64 {
    let mut out = raw.min(l_max - l_in);
    if let Some(c) = cap {
        out = out.min(c);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ecdf_counts_duplicates() {
        let ecdf = build_ecdf("m", &[5, 3, 5]).unwrap();
        assert_eq!(ecdf.cdf(2), 0.0);
        assert!((ecdf.cdf(4) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(ecdf.cdf(5), 1.0);
    }

    #[test]
    fn quantile_is_the_right_continuous_inverse() {
        let ecdf = build_ecdf("m", &[3, 5, 5]).unwrap();
        assert_eq!(ecdf.quantile(0.0), 3);
        assert_eq!(ecdf.quantile(1.0 / 3.0), 3);
        assert_eq!(ecdf.quantile(0.34), 5);
        assert_eq!(ecdf.quantile(0.999), 5);
    }

    #[test]
    fn empty_trace_is_rejected() {
        assert!(build_ecdf("m", &[]).is_err());
    }

    #[test]
    fn samples_are_deterministic_per_request() {
        let ecdf = build_ecdf("m", &(1..=100).collect::<Vec<_>>()).unwrap();
        let a = sample_output_length(&ecdf, 10, 1000, None, 7, "req-1").unwrap();
        let b = sample_output_length(&ecdf, 10, 1000, None, 7, "req-1").unwrap();
        assert_eq!(a, b);
        // Independent of the order in which other requests are sampled.
        let _ = sample_output_length(&ecdf, 10, 1000, None, 7, "req-2").unwrap();
        let c = sample_output_length(&ecdf, 10, 1000, None, 7, "req-1").unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn different_seeds_reshuffle_the_draws() {
        let ecdf = build_ecdf("m", &(1..=1000).collect::<Vec<_>>()).unwrap();
        let with_seed = |seed: u64| -> Vec<u64> {
            (0..32)
                .map(|i| sample_output_length(&ecdf, 0, 10_000, None, seed, &format!("r{}", i)).unwrap())
                .collect()
        };
        assert_ne!(with_seed(1), with_seed(2));
    }

    #[test]
    fn prompt_longer_than_context_errors() {
        let ecdf = build_ecdf("m", &[4]).unwrap();
        assert!(sample_output_length(&ecdf, 11, 10, None, 0, "r").is_err());
    }

    #[test]
    fn full_prompt_leaves_zero_output_tokens() {
        let ecdf = build_ecdf("m", &[4]).unwrap();
        assert_eq!(sample_output_length(&ecdf, 10, 10, None, 0, "r").unwrap(), 0);
    }

    proptest! {
        // A capped draw never exceeds the cap, the context budget or the
        // uncapped draw.
        #[test]
        fn cap_dominates_the_sample(
            seed in any::<u64>(),
            cap in 0u64..600,
            l_in in 0u64..500,
            idx in 0usize..1000,
        ) {
            let lengths: Vec<u64> = (1..=490).collect();
            let ecdf = build_ecdf("m", &lengths).unwrap();
            let l_max = 1000u64;
            let id = format!("req-{}", idx);
            let capped = sample_output_length(&ecdf, l_in, l_max, Some(cap), seed, &id).unwrap();
            let uncapped = sample_output_length(&ecdf, l_in, l_max, None, seed, &id).unwrap();
            prop_assert!(capped <= cap);
            prop_assert!(capped <= uncapped);
            prop_assert!(uncapped <= l_max - l_in);
        }

        // The raw draw is always one of the observed lengths.
        #[test]
        fn raw_draws_come_from_the_trace(u in 0.0f64..1.0) {
            let lengths = vec![2u64, 7, 7, 9, 40];
            let ecdf = build_ecdf("m", &lengths).unwrap();
            prop_assert!(lengths.contains(&ecdf.quantile(u)));
        }
    }
}
