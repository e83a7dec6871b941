//! Renders a replay trace as an SVG Gantt chart: one row per GPU, one
//! colored block per model tenure, vertical rules at stage boundaries.
//!
//! The output is deterministic — numbers are formatted with fixed precision
//! and colors derive from the sorted node ids — so rendering the same trace
//! twice yields byte-identical SVG.

use std::collections::BTreeSet;

use crate::runtime::{EventKind, RuntimeTrace};

const LEFT: f64 = 64.0;
const TOP: f64 = 56.0;
const RIGHT: f64 = 24.0;
const BOTTOM: f64 = 44.0;
const ROW_H: f64 = 26.0;
const ROW_GAP: f64 = 6.0;
const PLOT_W: f64 = 880.0;

/// Stable, well-spread hue for the i-th of n nodes.
fn color(idx: usize) -> String {
    // Golden-angle hops keep neighboring indices visually distinct.
    let hue = (idx as u64 * 137) % 360;
    format!("hsl({},65%,55%)", hue)
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders the trace for a node with `num_gpus` GPUs.
pub fn render_gantt(trace: &RuntimeTrace, num_gpus: usize) -> String {
    let span = if trace.total_time > 0.0 { trace.total_time } else { 1.0 };
    let scale = PLOT_W / span;
    let height = TOP + num_gpus as f64 * (ROW_H + ROW_GAP) + BOTTOM;
    let width = LEFT + PLOT_W + RIGHT;

    let nodes: Vec<String> = {
        let set: BTreeSet<&str> = trace.segments.iter().map(|s| s.node_id.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    };
    let color_of = |node: &str| -> String {
        let idx = nodes.iter().position(|n| n == node).unwrap_or(0);
        color(idx)
    };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0}\" height=\"{:.0}\" \
         viewBox=\"0 0 {:.0} {:.0}\" font-family=\"monospace\" font-size=\"11\">\n",
        width, height, width, height
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"18\" font-size=\"13\">GPU schedule — simulated {:.3}s \
         (planned {:.3}s)</text>\n",
        LEFT,
        trace.total_time,
        trace.planned_total
    ));

    // Legend: one swatch per node, left to right.
    let mut lx = LEFT;
    for node in &nodes {
        svg.push_str(&format!(
            "  <rect x=\"{:.1}\" y=\"26\" width=\"10\" height=\"10\" fill=\"{}\"/>\n",
            lx,
            color_of(node)
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"35\">{}</text>\n",
            lx + 14.0,
            esc(node)
        ));
        lx += 14.0 + 8.0 * (node.len() as f64 + 2.0);
    }

    // Row backgrounds and GPU labels.
    for gpu in 0..num_gpus {
        let y = TOP + gpu as f64 * (ROW_H + ROW_GAP);
        svg.push_str(&format!(
            "  <rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" \
             fill=\"#f0f0f0\"/>\n",
            LEFT, y, PLOT_W, ROW_H
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">gpu{}</text>\n",
            LEFT - 8.0,
            y + ROW_H / 2.0 + 4.0,
            gpu
        ));
    }

    // Occupancy blocks.
    for seg in &trace.segments {
        if seg.gpu >= num_gpus {
            continue;
        }
        let x = LEFT + seg.start * scale;
        let w = ((seg.end - seg.start) * scale).max(0.5);
        let y = TOP + seg.gpu as f64 * (ROW_H + ROW_GAP);
        svg.push_str(&format!(
            "  <rect x=\"{:.3}\" y=\"{:.1}\" width=\"{:.3}\" height=\"{:.1}\" fill=\"{}\" \
             stroke=\"#505050\" stroke-width=\"0.5\"><title>{} ({}) {:.4}s-{:.4}s</title></rect>\n",
            x,
            y,
            w,
            ROW_H,
            color_of(&seg.node_id),
            esc(&seg.node_id),
            esc(&seg.model_id),
            seg.start,
            seg.end
        ));
        if w > 46.0 {
            svg.push_str(&format!(
                "  <text x=\"{:.3}\" y=\"{:.1}\" fill=\"#ffffff\">{}</text>\n",
                x + 4.0,
                y + ROW_H / 2.0 + 4.0,
                esc(&seg.node_id)
            ));
        }
    }

    // Stage boundaries as dashed rules.
    let boundaries: BTreeSet<u64> = trace
        .events
        .iter()
        .filter(|e| e.kind == EventKind::StageAdvanced)
        .map(|e| e.time.to_bits())
        .collect();
    let rows_bottom = TOP + num_gpus as f64 * (ROW_H + ROW_GAP) - ROW_GAP;
    for bits in boundaries {
        let t = f64::from_bits(bits);
        let x = LEFT + t * scale;
        svg.push_str(&format!(
            "  <line x1=\"{:.3}\" y1=\"{:.1}\" x2=\"{:.3}\" y2=\"{:.1}\" stroke=\"#303030\" \
             stroke-dasharray=\"4,3\" stroke-width=\"1\"/>\n",
            x, TOP, x, rows_bottom
        ));
    }

    // Time axis.
    let axis_y = rows_bottom + 16.0;
    svg.push_str(&format!(
        "  <line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#000000\"/>\n",
        LEFT,
        axis_y,
        LEFT + PLOT_W,
        axis_y
    ));
    for i in 0..=6u32 {
        let t = span * f64::from(i) / 6.0;
        let x = LEFT + t * scale;
        svg.push_str(&format!(
            "  <line x1=\"{:.3}\" y1=\"{:.1}\" x2=\"{:.3}\" y2=\"{:.1}\" stroke=\"#000000\"/>\n",
            x,
            axis_y,
            x,
            axis_y + 4.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.3}\" y=\"{:.1}\" text-anchor=\"middle\">{:.3}</text>\n",
            x,
            axis_y + 16.0,
            t
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
