//! Samples output lengths from an empirical CDF, deterministically.
//!
//! Planned schedules depend on how many tokens each request will generate,
//! which is unknown before running. The planner draws lengths from the
//! empirical distribution (eCDF) of previously observed outputs via inverse
//! transform sampling. The variate for a request is a pure function of
//! `(seed, request id)`, so plans are reproducible and two draws for the
//! same request always agree.
//!
//! Run with: `cargo run --example sample_lengths`

use llmsched::lengths::{clamp_output_length, unit_variate};
use llmsched::{build_ecdf, sample_output_length};

fn main() -> llmsched::Result<()> {
    // An observed length trace: mostly short answers, a long tail. In
    // production this comes from serving logs (`model_id,output_len` rows).
    let mut observed: Vec<u64> = Vec::new();
    for i in 0..400u64 {
        observed.push(20 + (i * 37) % 180); // bulk: 20..200 tokens
    }
    for i in 0..40u64 {
        observed.push(600 + i * 20); // tail: 600..1400 tokens
    }
    let ecdf = build_ecdf("chat-13b", &observed)?;

    println!("eCDF over {} observations; selected quantiles:", ecdf.len());
    for q in [0.10, 0.25, 0.50, 0.75, 0.90, 0.99] {
        println!("  p{:<4} -> {:>5} tokens", (q * 100.0) as u32, ecdf.quantile(q));
    }

    // Draws are deterministic in (seed, request id): reordering requests or
    // re-running the planner cannot change them.
    println!("\nseeded draws (seed 42):");
    for id in ["req-000", "req-001", "req-002", "req-003"] {
        let u = unit_variate(42, id);
        let len = ecdf.quantile(u);
        println!("  {}: u = {:.6} -> {} tokens", id, u, len);
        assert_eq!(len, ecdf.quantile(unit_variate(42, id)), "repeatable");
    }
    println!("same ids under seed 43 give different draws:");
    for id in ["req-000", "req-001"] {
        println!("  {}: {} tokens", id, ecdf.quantile(unit_variate(43, id)));
    }

    // A real draw is clamped twice: by the application's generation cap at
    // draw time, and by the room the prompt leaves under the model's context
    // limit once the prompt length is known.
    let l_max = 1024; // model context limit
    let l_in = 900; // resolved prompt length
    let raw = ecdf.quantile(0.99);
    println!("\nclamping a p99 draw of {} tokens:", raw);
    println!(
        "  cap 100, prompt {} of {} -> {} tokens (the cap wins)",
        l_in,
        l_max,
        clamp_output_length(raw, l_in, l_max, Some(100))
    );
    println!(
        "  no cap,  prompt {} of {} -> {} tokens (context room wins)",
        l_in,
        l_max,
        clamp_output_length(raw, l_in, l_max, None)
    );

    // sample_output_length bundles the draw and both clamps.
    let sampled = sample_output_length(&ecdf, 100, l_max, Some(512), 42, "req-042")?;
    println!("\nsample_output_length(prompt 100, cap 512, seed 42) = {} tokens", sampled);
    Ok(())
}
