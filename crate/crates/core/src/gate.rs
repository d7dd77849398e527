//! Trust-region verification of candidate skills against the batch that was
//! collected under their parent.
//!
//! Each candidate is scored on the parent's historical `(state, action)`
//! pairs. The importance ratio compares the candidate's likelihood of the
//! recorded action with the behavior likelihood, the advantage is the
//! return-to-go minus the running return baseline, and the clipped surrogate
//! is averaged per trajectory and then across trajectories.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{ActionPolicy, BackendError};
use crate::runtime::Trajectory;
use crate::skill::{Skill, SkillId, SkillPool};

pub const MIN_LOG_RATIO: f64 = -13.815_510_557_964_274; // ln 1e-6
pub const MAX_LOG_RATIO: f64 = 13.815_510_557_964_274; // ln 1e6

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GateError {
    #[error("ratio must be positive and finite, got {0}")]
    Domain(f64),
    #[error("invalid gate parameter: {0}")]
    InvalidParam(String),
    #[error("no steps under the parent skill; candidate cannot be verified")]
    NoActiveSteps,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateParams {
    pub epsilon: f64,
    pub gamma: f64,
    /// EMA coefficient for both running baselines.
    pub alpha: f64,
    /// Score every step of each trajectory, not only the parent's steps.
    pub whole_trajectory: bool,
    /// Recompute behavior log-probabilities with the scorer instead of using
    /// the values recorded at sampling time.
    pub rescore_behavior: bool,
}

impl Default for GateParams {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            gamma: 1.0,
            alpha: 0.1,
            whole_trajectory: false,
            rescore_behavior: false,
        }
    }
}

impl GateParams {
    pub fn validate(&self) -> Result<(), GateError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(GateError::InvalidParam(format!(
                "gamma must be in (0, 1], got {}",
                self.gamma
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(GateError::InvalidParam(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha <= 1.0) {
            return Err(GateError::InvalidParam(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// `G_t = r_t + gamma * G_{t+1}`, computed back to front.
pub fn return_to_go(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (t, r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[t] = acc;
    }
    out
}

pub fn advantages(returns_to_go: &[f64], baseline: f64) -> Vec<f64> {
    returns_to_go.iter().map(|g| g - baseline).collect()
}

pub fn clipped_term(rho: f64, advantage: f64, epsilon: f64) -> Result<f64, GateError> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(GateError::Domain(rho));
    }
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(GateError::InvalidParam(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let clipped = rho.clamp(1.0 - epsilon, 1.0 + epsilon);
    Ok((rho * advantage).min(clipped * advantage))
}

/// `exp(candidate - behavior)` with the log ratio clamped to `[ln 1e-6, ln 1e6]`.
pub fn importance_ratio(candidate_logprob: f64, behavior_logprob: f64) -> f64 {
    let d = candidate_logprob - behavior_logprob;
    let d = if d.is_nan() {
        0.0
    } else {
        d.clamp(MIN_LOG_RATIO, MAX_LOG_RATIO)
    };
    d.exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateStep {
    /// Position in the owning trajectory.
    pub index: usize,
    pub behavior_logprob: f64,
    pub candidate_logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateTrajectory {
    pub rewards: Vec<f64>,
    /// Steps entering the surrogate, in trajectory order.
    pub steps: Vec<GateStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateInput {
    pub trajectories: Vec<GateTrajectory>,
    pub gamma: f64,
    pub epsilon: f64,
    pub return_baseline: f64,
}

impl GateInput {
    pub fn validate(&self) -> Result<(), GateError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(GateError::InvalidParam(format!(
                "gamma must be in (0, 1], got {}",
                self.gamma
            )));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(GateError::InvalidParam(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        for (i, t) in self.trajectories.iter().enumerate() {
            if let Some(s) = t.steps.iter().find(|s| s.index >= t.rewards.len()) {
                return Err(GateError::InvalidParam(format!(
                    "trajectory {i}: step index {} out of range for length {}",
                    s.index,
                    t.rewards.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    pub value: f64,
    /// Per-trajectory mean clipped term; `None` for trajectories without
    /// scored steps (they are left out of the mean).
    pub per_trajectory: Vec<Option<f64>>,
}

pub fn surrogate(input: &GateInput) -> Result<Surrogate, GateError> {
    input.validate()?;
    let mut per_trajectory = Vec::with_capacity(input.trajectories.len());
    let mut total = 0.0;
    let mut counted = 0usize;
    for traj in &input.trajectories {
        if traj.steps.is_empty() {
            per_trajectory.push(None);
            continue;
        }
        let adv = advantages(&return_to_go(&traj.rewards, input.gamma), input.return_baseline);
        let mut sum = 0.0;
        for step in &traj.steps {
            let rho = importance_ratio(step.candidate_logprob, step.behavior_logprob);
            sum += clipped_term(rho, adv[step.index], input.epsilon)?;
        }
        let mean = sum / traj.steps.len() as f64;
        per_trajectory.push(Some(mean));
        total += mean;
        counted += 1;
    }
    if counted == 0 {
        return Err(GateError::NoActiveSteps);
    }
    Ok(Surrogate {
        value: total / counted as f64,
        per_trajectory,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryTerm {
    pub episode_id: u64,
    pub term: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub batch_index: u64,
    pub parent: SkillId,
    pub candidate: SkillId,
    /// J of the candidate; absent when it could not be scored.
    pub surrogate: Option<f64>,
    pub accepted: bool,
    pub per_trajectory: Vec<TrajectoryTerm>,
    pub scored_steps: usize,
    pub approximate_scoring: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateOutcome {
    pub accepted: Option<SkillId>,
    pub reports: Vec<GateReport>,
}

/// Builds the surrogate input for `candidate` from the steps of `batch` where
/// `parent` was active (or every step in whole-trajectory mode).
pub fn build_gate_input(
    candidate: &Skill,
    parent: &Skill,
    batch: &[Trajectory],
    pool: &SkillPool,
    scorer: &dyn ActionPolicy,
    params: &GateParams,
    return_baseline: f64,
) -> Result<(GateInput, Vec<u64>, bool), GateError> {
    let mut trajectories = Vec::with_capacity(batch.len());
    let mut episodes = Vec::with_capacity(batch.len());
    let mut approximate = false;
    for traj in batch {
        let mut steps = Vec::new();
        for (index, step) in traj.steps.iter().enumerate() {
            if !params.whole_trajectory && step.skill_id != parent.id {
                continue;
            }
            let score = scorer.action_logprob(&step.state, candidate, &step.action)?;
            approximate |= score.approximate;
            let behavior_logprob = if params.rescore_behavior {
                let behavior_skill = if step.skill_id == parent.id {
                    parent
                } else {
                    pool.get(step.skill_id).unwrap_or(parent)
                };
                let b = scorer.action_logprob(&step.state, behavior_skill, &step.action)?;
                approximate |= b.approximate;
                b.logprob
            } else {
                step.behavior_logprob
            };
            steps.push(GateStep {
                index,
                behavior_logprob,
                candidate_logprob: score.logprob,
            });
        }
        trajectories.push(GateTrajectory {
            rewards: traj.rewards(),
            steps,
        });
        episodes.push(traj.episode_id);
    }
    let input = GateInput {
        trajectories,
        gamma: params.gamma,
        epsilon: params.epsilon,
        return_baseline,
    };
    Ok((input, episodes, approximate))
}

/// Index of the best scored report: highest J, ties to the lowest candidate id.
pub fn best_report(reports: &[GateReport]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in reports.iter().enumerate() {
        let Some(j) = r.surrogate else { continue };
        match best {
            None => best = Some(i),
            Some(b) => {
                let bj = reports[b].surrogate.unwrap_or(f64::NEG_INFINITY);
                if j > bj || (j == bj && r.candidate < reports[b].candidate) {
                    best = Some(i);
                }
            }
        }
    }
    best
}

/// Marks the winner accepted when its J is strictly positive.
pub fn decide(reports: &mut [GateReport]) -> Option<SkillId> {
    let best = best_report(reports)?;
    let j = reports[best].surrogate?;
    if j > 0.0 {
        reports[best].accepted = true;
        Some(reports[best].candidate)
    } else {
        None
    }
}

/// Scores every candidate, accepts at most one.
#[allow(clippy::too_many_arguments)]
pub fn gate_select(
    candidates: &[Skill],
    parent: &Skill,
    batch: &[Trajectory],
    pool: &SkillPool,
    scorer: &dyn ActionPolicy,
    params: &GateParams,
    return_baseline: f64,
    batch_index: u64,
) -> GateOutcome {
    let mut reports: Vec<GateReport> = candidates
        .par_iter()
        .map(|candidate| {
            let mut report = GateReport {
                batch_index,
                parent: parent.id,
                candidate: candidate.id,
                surrogate: None,
                accepted: false,
                per_trajectory: Vec::new(),
                scored_steps: 0,
                approximate_scoring: false,
                error: None,
            };
            let built = build_gate_input(candidate, parent, batch, pool, scorer, params, return_baseline);
            match built.and_then(|(input, episodes, approx)| {
                let s = surrogate(&input)?;
                Ok((input, episodes, approx, s))
            }) {
                Ok((input, episodes, approx, s)) => {
                    report.surrogate = Some(s.value);
                    report.approximate_scoring = approx;
                    report.scored_steps = input.trajectories.iter().map(|t| t.steps.len()).sum();
                    report.per_trajectory = episodes
                        .into_iter()
                        .zip(s.per_trajectory)
                        .filter_map(|(episode_id, term)| term.map(|term| TrajectoryTerm { episode_id, term }))
                        .collect();
                }
                Err(e) => report.error = Some(e.to_string()),
            }
            report
        })
        .collect();
    let accepted = decide(&mut reports);
    GateOutcome { accepted, reports }
}

/// `(1 - alpha) * current + alpha * mean(values)`; unchanged for no values.
pub fn ema_update(current: f64, values: &[f64], alpha: f64) -> f64 {
    if values.is_empty() {
        return current;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    (1.0 - alpha) * current + alpha * mean
}

pub fn update_return_baseline(current: f64, batch_returns: &[f64], alpha: f64) -> f64 {
    ema_update(current, batch_returns, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn return_to_go_examples() {
        assert_eq!(return_to_go(&[0.0, 0.0, 1.0], 0.5), vec![0.25, 0.5, 1.0]);
        assert_eq!(return_to_go(&[1.0, 1.0, 1.0], 1.0), vec![3.0, 2.0, 1.0]);
        assert_eq!(return_to_go(&[0.0; 4], 0.9), vec![0.0; 4]);
        assert!(return_to_go(&[], 0.9).is_empty());
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(advantages(&[0.25, 0.5, 1.0], 0.5), vec![-0.25, 0.0, 0.5]);
        assert_eq!(advantages(&[0.3, 0.3], 0.3), vec![0.0, 0.0]);
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clipped_term(1.0, 0.7, 0.3).unwrap(), 0.7);
        assert_eq!(clipped_term(1.5, 1.0, 0.2).unwrap(), 1.2);
        assert_eq!(clipped_term(0.5, -1.0, 0.2).unwrap(), -0.8);
        assert!(matches!(clipped_term(0.0, 1.0, 0.2), Err(GateError::Domain(_))));
    }

    fn step(index: usize, beh: f64, cand: f64) -> GateStep {
        GateStep {
            index,
            behavior_logprob: beh,
            candidate_logprob: cand,
        }
    }

    #[test]
    fn surrogate_hand_values() {
        let one = GateInput {
            trajectories: vec![GateTrajectory {
                rewards: vec![-1.0],
                steps: vec![step(0, 0.0, 2f64.ln())],
            }],
            gamma: 1.0,
            epsilon: 0.2,
            return_baseline: 0.0,
        };
        assert!((surrogate(&one).unwrap().value + 2.0).abs() < 1e-12);

        let two = GateInput {
            trajectories: vec![
                GateTrajectory {
                    rewards: vec![0.4],
                    steps: vec![step(0, -1.0, -1.0)],
                },
                GateTrajectory {
                    rewards: vec![-0.2],
                    steps: vec![step(0, -1.0, -1.0)],
                },
                GateTrajectory {
                    rewards: vec![5.0],
                    steps: vec![],
                },
            ],
            gamma: 1.0,
            epsilon: 0.2,
            return_baseline: 0.0,
        };
        let s = surrogate(&two).unwrap();
        assert!((s.value - 0.1).abs() < 1e-12);
        assert_eq!(s.per_trajectory[2], None);

        let none = GateInput {
            trajectories: vec![GateTrajectory {
                rewards: vec![1.0],
                steps: vec![],
            }],
            ..two
        };
        assert_eq!(surrogate(&none), Err(GateError::NoActiveSteps));
    }

    #[test]
    fn ratio_clamp() {
        assert_eq!(importance_ratio(0.0, -1000.0), 1e6_f64.ln().exp());
        assert!(importance_ratio(-1000.0, 0.0) > 0.0);
    }

    fn report(id: u64, j: Option<f64>) -> GateReport {
        GateReport {
            batch_index: 0,
            parent: SkillId(0),
            candidate: SkillId(id),
            surrogate: j,
            accepted: false,
            per_trajectory: vec![],
            scored_steps: 1,
            approximate_scoring: false,
            error: None,
        }
    }

    #[test]
    fn decide_requires_strictly_positive_argmax() {
        let mut r = vec![report(1, Some(0.3)), report(2, Some(-0.1)), report(3, Some(0.5))];
        assert_eq!(decide(&mut r), Some(SkillId(3)));
        assert_eq!(r.iter().filter(|x| x.accepted).count(), 1);
        let mut r = vec![report(1, Some(0.0))];
        assert_eq!(decide(&mut r), None);
        let mut r = vec![report(5, Some(0.2)), report(4, Some(0.2)), report(6, None)];
        assert_eq!(decide(&mut r), Some(SkillId(4)));
    }

    #[test]
    fn baseline_ema() {
        assert_eq!(update_return_baseline(0.0, &[1.0, 1.0], 0.1), 0.1);
        assert_eq!(update_return_baseline(0.4, &[0.4], 0.1), 0.4);
        assert_eq!(update_return_baseline(0.4, &[0.9, 0.7], 1.0), 0.8);
        assert_eq!(update_return_baseline(0.4, &[], 0.5), 0.4);
    }
}
