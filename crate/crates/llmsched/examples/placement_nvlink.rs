//! NVLink-aware GPU placement and reload-minimizing stage transitions.
//!
//! A tensor-parallel replica exchanges activations every layer, so a tp ≥ 2
//! GPU group must sit inside one NVLink island or cover a union of whole
//! islands. Across a stage transition, a replica that keeps both its plan
//! and its exact GPU set carries its weights for free; every other replica
//! pays the model's loading time, and the placement search (exact up to 8
//! GPUs) picks the assignment that minimizes those reload seconds.
//!
//! Run with: `cargo run --example placement_nvlink`

use llmsched::cost::CostTable;
use llmsched::placement::{
    is_valid_tp_group, place_stage, Occupant, PlacementRequest, PlacementState, ResidentModel,
};
use llmsched::{ExecutionPlan, GpuTopology};

/// 8 GPUs wired as two 4-GPU NVLink islands.
fn node() -> GpuTopology {
    GpuTopology {
        num_gpus: 8,
        mem_bytes_per_gpu: 80 * (1u64 << 30),
        nvlink_groups: vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]],
        reserved_mem_fraction: 0.10,
    }
}

/// Loading times only — connectivity and reload demos need no phase costs.
fn loading_table() -> CostTable {
    let mut t = CostTable::new();
    for (model, seconds) in [("small-13b", 5.0), ("large-34b", 7.0), ("judge-34b", 7.0)] {
        for dp in 1..=8u64 {
            for tp in [1u64, 2, 4, 8] {
                if dp * tp <= 8 {
                    t.set_loading(model, ExecutionPlan::new(dp, tp), seconds);
                }
            }
        }
    }
    t
}

fn entry(node_id: &str, model_id: &str, dp: u64, tp: u64) -> PlacementRequest {
    PlacementRequest {
        node_id: node_id.into(),
        model_id: model_id.into(),
        plan: ExecutionPlan::new(dp, tp),
    }
}

fn show(state: &PlacementState) {
    for (node_id, resident) in &state.resident {
        let groups = resident
            .replica_gpus
            .iter()
            .map(|g| format!("{:?}", g))
            .collect::<Vec<_>>()
            .join(" ");
        println!("    {:<8} {}  on {}", node_id, resident.plan.key(), groups);
    }
}

fn main() -> llmsched::Result<()> {
    let topo = node();
    let table = loading_table();

    println!("connectivity on two 4-GPU NVLink islands:");
    for (gpus, why) in [
        (vec![0, 1], "inside island 0"),
        (vec![2, 3], "inside island 0"),
        (vec![3, 4], "straddles the island boundary"),
        (vec![2, 3, 4, 5], "half of each island"),
        (vec![4, 5, 6, 7], "exactly island 1"),
        (vec![0, 1, 2, 3, 4, 5, 6, 7], "union of both whole islands"),
    ] {
        println!(
            "  tp group {:?}: {:<7} ({})",
            gpus,
            if is_valid_tp_group(&gpus, &topo) { "valid" } else { "invalid" },
            why
        );
    }

    // Stage 0 on an empty node: everything pays its loading time.
    let stage0 = [entry("gen", "large-34b", 1, 4), entry("helper", "small-13b", 4, 1)];
    let out0 = place_stage(&PlacementState::empty(topo.num_gpus as usize), &stage0, &topo, &table)?;
    println!("\nstage 0 onto an empty node (reload {:.1} s = 7 + 4x5):", out0.reload_cost);
    show(&out0.state);
    assert_eq!(out0.reload_cost, 7.0 + 4.0 * 5.0);

    // Stage 1: `gen` keeps dp1tp4 (carried free if its GPU set survives),
    // `helper` shrinks to dp1tp1 (re-planned: pays loading), and a judge
    // arrives on a whole island (new: pays loading). The minimizer keeps
    // `gen` exactly where it was instead of reshuffling it.
    let stage1 = [
        entry("gen", "large-34b", 1, 4),
        entry("helper", "small-13b", 1, 1),
        entry("judge", "judge-34b", 1, 2),
    ];
    let out1 = place_stage(&out0.state, &stage1, &topo, &table)?;
    println!("stage 1 transition (reload {:.1} s = 5 + 7, gen carried free):", out1.reload_cost);
    show(&out1.state);
    let gen0 = &out0.state.resident["gen"].replica_gpus;
    let gen1 = &out1.state.resident["gen"].replica_gpus;
    assert_eq!(gen0, gen1, "kept replica must not move");
    assert_eq!(out1.reload_cost, 5.0 + 7.0);
    assert!(out1.moves.is_empty());
    assert_eq!(out1.replica_loads["gen"], vec![0.0]);

    // Stage 2 needs a tp8 group, which only exists as the union of both
    // whole islands: everything else must vacate.
    let stage2 = [entry("judge", "judge-34b", 1, 8)];
    let out2 = place_stage(&out1.state, &stage2, &topo, &table)?;
    println!("stage 2, judge grows to tp8 (reload {:.1} s, re-planned):", out2.reload_cost);
    show(&out2.state);
    let judge: Vec<usize> = out2.state.resident["judge"].replica_gpus[0].clone();
    assert_eq!(judge, (0..8).collect::<Vec<_>>());

    // A same-plan replica still pays when the new stage's connectivity
    // needs force it off its old GPUs: helper keeps dp4tp1 but straddles
    // both islands, and an incoming tp4 group must claim a whole island,
    // evicting whichever replicas block it.
    let mut scattered = PlacementState::empty(topo.num_gpus as usize);
    let helper_gpus = [2usize, 3, 4, 5];
    for (replica, &gpu) in helper_gpus.iter().enumerate() {
        scattered.occupants[gpu] = Some(Occupant {
            node_id: "helper".into(),
            model_id: "small-13b".into(),
            replica,
            rank: 0,
        });
    }
    scattered.resident.insert(
        "helper".into(),
        ResidentModel {
            model_id: "small-13b".into(),
            plan: ExecutionPlan::new(4, 1),
            replica_gpus: helper_gpus.iter().map(|&g| vec![g]).collect(),
        },
    );
    println!(
        "\nprevious stage left helper dp4tp1 straddling both islands: {:?}",
        scattered.resident["helper"].replica_gpus
    );
    let stage3 = [entry("helper", "small-13b", 4, 1), entry("gen", "large-34b", 1, 4)];
    let out3 = place_stage(&scattered, &stage3, &topo, &table)?;
    println!(
        "gen dp1tp4 arrives: reload {:.1} s, {} helper replica(s) moved to clear an island",
        out3.reload_cost,
        out3.moves.len()
    );
    for m in &out3.moves {
        println!("    moved {} replica {} from {:?} to {:?}", m.node_id, m.replica, m.from, m.to);
    }
    show(&out3.state);
    assert!(
        is_valid_tp_group(&out3.state.resident["gen"].replica_gpus[0], &topo),
        "gen's tp4 group must respect NVLink islands"
    );
    assert!(!out3.moves.is_empty(), "clearing an island must move someone");
    // Moved replicas pay loading like new ones: total = gen + the moves.
    assert_eq!(out3.reload_cost, 7.0 + out3.moves.len() as f64 * 5.0);
    Ok(())
}
