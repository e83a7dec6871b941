//! Fits the per-iteration latency model from (synthetic) profiling samples.
//!
//! One engine iteration is modeled as three affine phases:
//!
//! ```text
//! t = a_comp[B]*FLOPs + b_comp[B]     forward computation
//!   + a_prep[B]*(B*s)  + b_prep[B]    input preparation (padded tokens)
//!   + a_samp[B]*S      + b_samp[B]    sampling (unpadded tokens)
//! ```
//!
//! with coefficients fitted per model, per tensor-parallel degree and per
//! profiled batch-size bucket. This example generates samples from known
//! ground-truth coefficients, fits them back with least squares, and shows
//! that the fit recovers the truth and interpolates between batch buckets.
//!
//! Run with: `cargo run --example fit_cost_model`

use llmsched::cost::{FitOptions, LoadingSample, PhaseTriple, ProfileSample};
use llmsched::{fit_coefficients, ExecutionPlan, IterationDescriptor, IterationKind, PhaseKind};

/// Ground truth used by the generator: latency = a*x + b per phase.
fn true_coefficients(tp: u64, phase: PhaseKind, batch: u64) -> (f64, f64) {
    match phase {
        // Computation scales with FLOPs and speeds up with tensor parallelism.
        PhaseKind::Comp => (1.0 / (120e12 * tp as f64), 0.004),
        // Preparation cost per padded token grows slightly with batch size.
        PhaseKind::Prep => (2.0e-8 * (1.0 + batch as f64 / 256.0), 0.001),
        // Sampling cost per generated token.
        PhaseKind::Samp => (5.0e-8, 0.0005),
    }
}

fn main() -> llmsched::Result<()> {
    let model_id = "chat-13b";
    let mut samples = Vec::new();
    for tp in [1u64, 2, 4] {
        for phase in PhaseKind::ALL {
            for batch in [1u64, 8, 64] {
                let (a, b) = true_coefficients(tp, phase, batch);
                for i in 1..=6 {
                    // x is FLOPs for comp, B*s for prep, S for samp; the fit
                    // never needs to know which, it just sees (x, latency).
                    let x = i as f64 * if phase == PhaseKind::Comp { 2.0e12 } else { 4096.0 };
                    samples.push(ProfileSample {
                        model_id: model_id.into(),
                        tp,
                        phase,
                        batch,
                        x,
                        latency_s: a * x + b,
                    });
                }
            }
        }
    }
    let loading = vec![
        LoadingSample {
            model_id: model_id.into(),
            plan: ExecutionPlan { dp: 1, tp: 1 },
            seconds: 18.0,
        },
        LoadingSample {
            model_id: model_id.into(),
            plan: ExecutionPlan { dp: 1, tp: 2 },
            seconds: 11.0,
        },
    ];

    let table = fit_coefficients(&samples, &loading, FitOptions::default())?;

    println!("fitted coefficients for '{}':\n", model_id);
    println!(
        "{:>3}  {:>5}  {:>6}  {:>14}  {:>12}",
        "tp", "phase", "bucket", "a (slope)", "b (intercept)"
    );
    for (tp, triple) in &table.coefficients[model_id] {
        for phase in PhaseKind::ALL {
            for (bucket, (a, b)) in &triple.phase(phase).buckets {
                let (ta, tb) = true_coefficients(*tp, phase, *bucket);
                assert!((a - ta).abs() <= 1e-9 * ta.abs() + 1e-15, "slope recovered");
                assert!((b - tb).abs() <= 1e-9 * tb.abs() + 1e-15, "intercept recovered");
                println!(
                    "{:>3}  {:>5}  {:>6}  {:>14.3e}  {:>12.3e}",
                    tp,
                    phase.as_str(),
                    bucket,
                    a,
                    b
                );
            }
        }
    }
    println!("\nexact generator data -> the fit recovers the truth (asserted above)");

    // Between profiled buckets (8 and 64) the evaluation interpolates in B.
    let triple: &PhaseTriple = table.triple(model_id, 1)?;
    let prep = triple.phase(PhaseKind::Prep);
    let x = 8192.0;
    let at_8 = prep.evaluate(8, x)?;
    let at_64 = prep.evaluate(64, x)?;
    let at_36 = prep.evaluate(36, x)?;
    println!("\nprep-phase latency at {} padded tokens:", x);
    println!("  B=8  -> {:.6} s (profiled bucket)", at_8);
    println!("  B=36 -> {:.6} s (interpolated halfway)", at_36);
    println!("  B=64 -> {:.6} s (profiled bucket)", at_64);
    assert!((at_36 - (at_8 + at_64) / 2.0).abs() < 1e-12);

    // The same table prices a whole iteration: a prefill of 16 prompts of
    // 512 tokens each on a model with known FLOPs-per-iteration.
    let it = IterationDescriptor {
        kind: IterationKind::Prefill,
        batch: 16,
        max_len: 512,
        total_len: 16 * 512,
    };
    println!(
        "\nloading times recorded in the table: {:?}",
        table.loading_time
    );
    println!(
        "a 16x512-token prefill with 3.5e12 FLOPs at tp=2 costs {:.4} s",
        {
            let t2 = table.triple(model_id, 2)?;
            t2.phase(PhaseKind::Comp).evaluate(it.batch, 3.5e12)?
                + t2.phase(PhaseKind::Prep)
                    .evaluate(it.batch, (it.batch * it.max_len) as f64)?
                + t2.phase(PhaseKind::Samp).evaluate(it.batch, it.total_len as f64)?
        }
    );
    Ok(())
}
