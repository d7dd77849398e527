//! Input generators shared by the benchmarks.

use rand::Rng;
use skillmdp::gate::{GateInput, GateStep, GateTrajectory};

/// `trajectories` trajectories of `len` steps, every step scored, with
/// rewards in [0, 1) and log-ratio offsets in [-3, 3).
pub fn random_gate_input(rng: &mut impl Rng, trajectories: usize, len: usize) -> GateInput {
    let trajectories = (0..trajectories)
        .map(|_| {
            let rewards: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
            let steps = (0..len)
                .map(|index| {
                    let beh = -rng.random::<f64>() * 5.0;
                    GateStep {
                        index,
                        behavior_logprob: beh,
                        candidate_logprob: beh + rng.random_range(-3.0..3.0),
                    }
                })
                .collect();
            GateTrajectory { rewards, steps }
        })
        .collect();
    GateInput {
        trajectories,
        gamma: 0.9,
        epsilon: 0.2,
        return_baseline: 0.5,
    }
}
