//! Direct transcriptions of the formulas, kept free of any call into the
//! optimized implementations they check.

use crate::env::PegFeedback;
use crate::gate::GateInput;

/// `G_t` by explicit forward summation of discounted rewards.
pub fn naive_return_to_go(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for t in 0..rewards.len() {
        let mut g = 0.0;
        let mut discount = 1.0;
        for r in &rewards[t..] {
            g += discount * r;
            discount *= gamma;
        }
        out.push(g);
    }
    out
}

/// Clipped surrogate by a triple loop over trajectories, steps and the two
/// branches of the min. `None` when no trajectory has a scored step.
pub fn naive_surrogate(input: &GateInput) -> Option<f64> {
    let lo = (1e-6f64).ln();
    let hi = (1e6f64).ln();
    let mut per_trajectory = Vec::new();
    for traj in &input.trajectories {
        if traj.steps.is_empty() {
            continue;
        }
        let mut sum = 0.0;
        for step in &traj.steps {
            let mut g = 0.0;
            let mut discount = 1.0;
            for k in step.index..traj.rewards.len() {
                g += discount * traj.rewards[k];
                discount *= input.gamma;
            }
            let advantage = g - input.return_baseline;
            let mut d = step.candidate_logprob - step.behavior_logprob;
            if d < lo {
                d = lo;
            }
            if d > hi {
                d = hi;
            }
            let rho = d.exp();
            let mut branches = [0.0f64; 2];
            for (b, slot) in branches.iter_mut().enumerate() {
                *slot = if b == 0 {
                    rho * advantage
                } else {
                    let c = if rho < 1.0 - input.epsilon {
                        1.0 - input.epsilon
                    } else if rho > 1.0 + input.epsilon {
                        1.0 + input.epsilon
                    } else {
                        rho
                    };
                    c * advantage
                };
            }
            sum += if branches[0] < branches[1] {
                branches[0]
            } else {
                branches[1]
            };
        }
        per_trajectory.push(sum / traj.steps.len() as f64);
    }
    if per_trajectory.is_empty() {
        return None;
    }
    Some(per_trajectory.iter().sum::<f64>() / per_trajectory.len() as f64)
}

/// Peg counts with a double loop: blacks first, then each remaining guess
/// digit claims one unclaimed, non-black secret position.
pub fn naive_peg_count(secret: &[u8], guess: &[u8]) -> Option<PegFeedback> {
    if secret.len() != guess.len() {
        return None;
    }
    let n = secret.len();
    let mut black_at = vec![false; n];
    let mut black = 0;
    for i in 0..n {
        if secret[i] == guess[i] {
            black_at[i] = true;
            black += 1;
        }
    }
    let mut claimed = black_at.clone();
    let mut white = 0;
    for i in 0..n {
        if black_at[i] {
            continue;
        }
        for j in 0..n {
            if !claimed[j] && secret[j] == guess[i] {
                claimed[j] = true;
                white += 1;
                break;
            }
        }
    }
    Some(PegFeedback { black, white })
}
