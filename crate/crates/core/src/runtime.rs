//! The episode loop: select a skill, act under it until the judge hands
//! control back, select again.

use std::collections::BTreeSet;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{ActionPolicy, BackendError, Status, TerminationJudge};
use crate::env::{episode_seed, EnvFactory, EnvState, Environment};
use crate::similarity::Similarity;
use crate::skill::{Skill, SkillId, SkillPool};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("cannot select a skill from an empty pool")]
    EmptyPool,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("episode {episode_index} failed after {} step(s): {source}", partial.steps.len())]
    Episode {
        episode_index: u64,
        #[source]
        source: BackendError,
        partial: Box<Trajectory>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: EnvState,
    pub skill_id: SkillId,
    pub action: String,
    pub behavior_logprob: f64,
    pub reward: f64,
    pub skill_started: bool,
    pub skill_terminated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode_id: u64,
    pub steps: Vec<Step>,
    pub total_return: f64,
    pub env_name: String,
    pub backend_name: String,
    /// State after the last step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_state: Option<EnvState>,
}

impl Trajectory {
    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    /// Skills selected at least once, in id order.
    pub fn invoked_skills(&self) -> BTreeSet<SkillId> {
        self.steps
            .iter()
            .filter(|s| s.skill_started)
            .map(|s| s.skill_id)
            .collect()
    }

    /// Number of selection events for `skill`.
    pub fn selection_count(&self, skill: SkillId) -> u64 {
        self.steps
            .iter()
            .filter(|s| s.skill_started && s.skill_id == skill)
            .count() as u64
    }

    /// Indices of steps where `skill` was active.
    pub fn active_steps(&self, skill: SkillId) -> Vec<usize> {
        self.steps
            .iter()
            .enumerate()
            .filter(|(_, s)| s.skill_id == skill)
            .map(|(i, _)| i)
            .collect()
    }

    /// Checks the recorded structure: the return is the reward sum and every
    /// run of one skill starts with `skill_started` and ends with
    /// `skill_terminated`.
    pub fn check_invariants(&self) -> Result<(), String> {
        let sum: f64 = self.steps.iter().map(|s| s.reward).sum();
        if (sum - self.total_return).abs() > 1e-12 {
            return Err(format!("total_return {} but rewards sum to {sum}", self.total_return));
        }
        for (i, step) in self.steps.iter().enumerate() {
            let boundary = i == 0 || self.steps[i - 1].skill_terminated;
            if step.skill_started != boundary {
                return Err(format!(
                    "step {i}: skill_started={} at boundary={boundary}",
                    step.skill_started
                ));
            }
            if i > 0 && !boundary && step.skill_id != self.steps[i - 1].skill_id {
                return Err(format!("step {i}: skill changed without termination"));
            }
        }
        if let Some(last) = self.steps.last() {
            if !last.skill_terminated {
                return Err("last step does not terminate its skill".into());
            }
        }
        Ok(())
    }
}

/// Tie-break helper: a strictly greater score wins, equal scores keep the
/// lower id.
fn better(score: f64, id: SkillId, best: Option<(f64, SkillId)>) -> bool {
    match best {
        None => true,
        Some((bs, bid)) => score > bs || (score == bs && id < bid),
    }
}

pub fn select_skill_similarity<'p>(
    state: &EnvState,
    pool: &'p SkillPool,
    sim: &dyn Similarity,
) -> Result<&'p Skill, RuntimeError> {
    let mut best: Option<(f64, SkillId)> = None;
    let mut chosen = None;
    for skill in pool.skills() {
        let s = sim.similarity(&state.text, &skill.initiation);
        if better(s, skill.id, best) {
            best = Some((s, skill.id));
            chosen = Some(skill);
        }
    }
    chosen.ok_or(RuntimeError::EmptyPool)
}

pub trait ValueEstimator: Send + Sync {
    fn value(&self, state: &EnvState, skill: &Skill) -> f64;
}

/// q(s, w) = online score of w, independent of s.
#[derive(Debug, Clone, Copy, Default)]
pub struct OnlineScoreValue;

impl ValueEstimator for OnlineScoreValue {
    fn value(&self, _state: &EnvState, skill: &Skill) -> f64 {
        skill.online_score()
    }
}

/// Top-k skills by similarity, then the best of those by `q`.
pub fn select_skill_value<'p>(
    state: &EnvState,
    pool: &'p SkillPool,
    sim: &dyn Similarity,
    k: usize,
    q: &dyn ValueEstimator,
) -> Result<&'p Skill, RuntimeError> {
    if k == 0 {
        return Err(RuntimeError::InvalidArgument("k must be at least 1".into()));
    }
    if pool.is_empty() {
        return Err(RuntimeError::EmptyPool);
    }
    let mut ranked: Vec<(f64, &Skill)> = pool
        .skills()
        .iter()
        .map(|s| (sim.similarity(&state.text, &s.initiation), s))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.id.cmp(&b.1.id)));
    ranked.truncate(k);
    let mut best: Option<(f64, SkillId)> = None;
    let mut chosen = None;
    for (_, skill) in ranked {
        let v = q.value(state, skill);
        if better(v, skill.id, best) {
            best = Some((v, skill.id));
            chosen = Some(skill);
        }
    }
    chosen.ok_or(RuntimeError::EmptyPool)
}

pub trait SkillSelector: Send + Sync {
    fn select<'p>(&self, state: &EnvState, pool: &'p SkillPool) -> Result<&'p Skill, RuntimeError>;
}

pub struct SimilaritySelector {
    pub sim: Arc<dyn Similarity>,
}

impl SkillSelector for SimilaritySelector {
    fn select<'p>(&self, state: &EnvState, pool: &'p SkillPool) -> Result<&'p Skill, RuntimeError> {
        select_skill_similarity(state, pool, self.sim.as_ref())
    }
}

pub struct ValueSelector {
    pub sim: Arc<dyn Similarity>,
    pub k: usize,
    pub q: Arc<dyn ValueEstimator>,
}

impl SkillSelector for ValueSelector {
    fn select<'p>(&self, state: &EnvState, pool: &'p SkillPool) -> Result<&'p Skill, RuntimeError> {
        select_skill_value(state, pool, self.sim.as_ref(), self.k, self.q.as_ref())
    }
}

/// A terminal state always hands control back; otherwise the judge decides.
/// Protocol errors are returned so the caller can log them before treating
/// them as DONE.
pub fn check_termination(
    state: &EnvState,
    skill: &Skill,
    judge: &dyn TerminationJudge,
) -> Result<Status, BackendError> {
    if state.terminal {
        return Ok(Status::Done);
    }
    judge.judge_termination(state, skill)
}

pub struct EpisodeContext<'a> {
    pub pool: &'a SkillPool,
    pub policy: &'a dyn ActionPolicy,
    pub judge: &'a dyn TerminationJudge,
    pub selector: &'a dyn SkillSelector,
    pub max_steps: usize,
}

pub fn run_episode(
    env: &mut dyn Environment,
    seed: u64,
    episode_id: u64,
    ctx: &EpisodeContext<'_>,
) -> Result<Trajectory, RuntimeError> {
    if ctx.max_steps == 0 {
        return Err(RuntimeError::InvalidArgument("max_steps must be at least 1".into()));
    }
    if ctx.pool.is_empty() {
        return Err(RuntimeError::EmptyPool);
    }
    let mut traj = Trajectory {
        episode_id,
        steps: Vec::new(),
        total_return: 0.0,
        env_name: env.name().to_string(),
        backend_name: ctx.policy.name().to_string(),
        final_state: None,
    };
    let mut state = env.reset(seed);
    let mut active: Option<SkillId> = None;
    let fail = |mut traj: Trajectory, state: EnvState, source| {
        traj.final_state = Some(state);
        RuntimeError::Episode {
            episode_index: episode_id,
            source,
            partial: Box::new(traj),
        }
    };
    for t in 0..ctx.max_steps {
        if state.terminal {
            break;
        }
        let (skill, started) = match active.and_then(|id| ctx.pool.get(id)) {
            Some(skill) => (skill, false),
            None => (ctx.selector.select(&state, ctx.pool)?, true),
        };
        let sample = match ctx.policy.sample_action(&state, skill) {
            Ok(s) => s,
            Err(e) => return Err(fail(traj, state, e)),
        };
        let outcome = env.step(&sample.action);
        let last = outcome.terminal || t + 1 == ctx.max_steps;
        let done = if last {
            true
        } else {
            match check_termination(&outcome.state, skill, ctx.judge) {
                Ok(status) => status == Status::Done,
                Err(BackendError::Protocol { message, raw }) => {
                    log::warn!("judge reply unusable ({message}), handing control back: {raw:?}");
                    true
                }
                Err(e) => return Err(fail(traj, state, e)),
            }
        };
        traj.total_return += outcome.reward;
        traj.steps.push(Step {
            state,
            skill_id: skill.id,
            action: sample.action,
            behavior_logprob: sample.logprob,
            reward: outcome.reward,
            skill_started: started,
            skill_terminated: done,
            prompt: Some(sample.prompt),
        });
        active = if done { None } else { Some(skill.id) };
        state = outcome.state;
        if outcome.terminal {
            break;
        }
    }
    traj.final_state = Some(state);
    Ok(traj)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub seed: u64,
    /// Id given to the first episode; the rest follow consecutively.
    pub first_episode_id: u64,
    pub parallelism: usize,
}

/// Runs `batch_size` episodes, each in a fresh environment seeded from
/// `(seed, index)`. Output order is episode order regardless of parallelism.
pub fn collect_batch(
    factory: &dyn EnvFactory,
    ctx: &EpisodeContext<'_>,
    spec: BatchSpec,
) -> Result<Vec<Trajectory>, RuntimeError> {
    if spec.batch_size == 0 {
        return Err(RuntimeError::InvalidArgument("batch size must be at least 1".into()));
    }
    let one = |i: usize| {
        let mut env = factory.create();
        run_episode(
            env.as_mut(),
            episode_seed(spec.seed, i as u64),
            spec.first_episode_id + i as u64,
            ctx,
        )
    };
    let results: Vec<Result<Trajectory, RuntimeError>> = if spec.parallelism > 1 {
        let workers = rayon::ThreadPoolBuilder::new()
            .num_threads(spec.parallelism)
            .build()
            .map_err(|e| RuntimeError::InvalidArgument(format!("thread pool: {e}")))?;
        workers.install(|| (0..spec.batch_size).into_par_iter().map(one).collect())
    } else {
        (0..spec.batch_size).map(one).collect()
    };
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ActionSample;
    use crate::backend::ActionScore;
    use crate::env::{LineWorld, LineWorldConfig};
    use crate::similarity::JaccardSimilarity;
    use crate::skill::{SkillDraft, WhitespaceTokenizer};

    struct Always(&'static str);

    impl ActionPolicy for Always {
        fn name(&self) -> &str {
            "always"
        }
        fn sample_action(&self, _: &EnvState, _: &Skill) -> Result<ActionSample, BackendError> {
            Ok(ActionSample {
                action: self.0.into(),
                logprob: 0.0,
                raw: format!("<action>{}</action>", self.0),
                prompt: String::new(),
            })
        }
        fn action_logprob(&self, _: &EnvState, _: &Skill, _: &str) -> Result<ActionScore, BackendError> {
            Ok(ActionScore {
                logprob: 0.0,
                approximate: false,
            })
        }
    }

    struct Judge(&'static str);

    impl TerminationJudge for Judge {
        fn judge_raw(&self, _: &EnvState, _: &Skill) -> Result<String, BackendError> {
            Ok(self.0.into())
        }
    }

    fn pool(inits: &[&str]) -> SkillPool {
        let drafts = inits
            .iter()
            .enumerate()
            .map(|(i, init)| SkillDraft::new(format!("S{i}"), *init, vec!["act".into()], "stop"))
            .collect();
        SkillPool::from_drafts(8, drafts, &WhitespaceTokenizer).unwrap()
    }

    fn state(text: &str) -> EnvState {
        EnvState {
            text: text.into(),
            admissible: None,
            terminal: false,
            step_index: 0,
        }
    }

    #[test]
    fn similarity_selection_and_ties() {
        let p = pool(&["nothing here", "guess feedback after"]);
        let s = state("guess feedback pegs");
        assert_eq!(select_skill_similarity(&s, &p, &JaccardSimilarity).unwrap().name, "S1");
        let p = pool(&["same text", "same text"]);
        assert_eq!(
            select_skill_similarity(&s, &p, &JaccardSimilarity).unwrap().id,
            SkillId(1)
        );
        let empty = SkillPool::new(2).unwrap();
        assert!(matches!(
            select_skill_similarity(&s, &empty, &JaccardSimilarity),
            Err(RuntimeError::EmptyPool)
        ));
    }

    struct FixedSim(Vec<(&'static str, f64)>);

    impl Similarity for FixedSim {
        fn similarity(&self, _: &str, b: &str) -> f64 {
            self.0.iter().find(|(k, _)| *k == b).map_or(0.0, |(_, v)| *v)
        }
    }

    #[test]
    fn value_selection_is_two_stage() {
        let mut p = pool(&["A", "B", "C"]);
        let scores = [0.1, 0.4, 0.9];
        for (skill, g) in p.skills_mut().zip(scores) {
            skill.cum_gain = g;
        }
        let sim = FixedSim(vec![("A", 0.9), ("B", 0.5), ("C", 0.1)]);
        let s = state("x");
        assert_eq!(
            select_skill_value(&s, &p, &sim, 2, &OnlineScoreValue)
                .unwrap()
                .initiation,
            "B"
        );
        assert_eq!(
            select_skill_value(&s, &p, &sim, 10, &OnlineScoreValue)
                .unwrap()
                .initiation,
            "C"
        );
        assert_eq!(
            select_skill_value(&s, &p, &sim, 1, &OnlineScoreValue)
                .unwrap()
                .initiation,
            "A"
        );
    }

    #[test]
    fn always_right_walks_to_goal() {
        let p = pool(&["walk"]);
        let ctx = EpisodeContext {
            pool: &p,
            policy: &Always("[right]"),
            judge: &Judge("<status>CONTINUE</status>"),
            selector: &SimilaritySelector {
                sim: Arc::new(JaccardSimilarity),
            },
            max_steps: 10,
        };
        let mut env = LineWorld::new(LineWorldConfig::default());
        let t = run_episode(&mut env, 0, 0, &ctx).unwrap();
        assert_eq!(t.steps.len(), 3);
        assert_eq!(t.total_return, 1.0);
        assert!(t.steps[0].skill_started && !t.steps[1].skill_started);
        assert!(t.steps[2].skill_terminated);
        t.check_invariants().unwrap();
        assert!(t.final_state.unwrap().terminal);
    }

    #[test]
    fn judge_firing_every_step_and_garbage_judge() {
        let p = pool(&["walk"]);
        for reply in ["<status>DONE</status>", "no idea"] {
            let ctx = EpisodeContext {
                pool: &p,
                policy: &Always("[left]"),
                judge: &Judge(reply),
                selector: &SimilaritySelector {
                    sim: Arc::new(JaccardSimilarity),
                },
                max_steps: 4,
            };
            let mut env = LineWorld::new(LineWorldConfig::default());
            let t = run_episode(&mut env, 0, 0, &ctx).unwrap();
            assert_eq!(t.steps.len(), 4);
            assert!(t.steps.iter().all(|s| s.skill_started && s.skill_terminated));
            t.check_invariants().unwrap();
        }
    }

    #[test]
    fn zero_max_steps_is_rejected() {
        let p = pool(&["walk"]);
        let ctx = EpisodeContext {
            pool: &p,
            policy: &Always("[right]"),
            judge: &Judge(""),
            selector: &SimilaritySelector {
                sim: Arc::new(JaccardSimilarity),
            },
            max_steps: 0,
        };
        let mut env = LineWorld::new(LineWorldConfig::default());
        assert!(matches!(
            run_episode(&mut env, 0, 0, &ctx),
            Err(RuntimeError::InvalidArgument(_))
        ));
    }
}
