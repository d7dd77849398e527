//! Score bookkeeping, pruning and the per-batch evolution operator.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backends, Guidance};
use crate::gate::{self, best_report, GateParams, GateReport};
use crate::gradient::{self, AggregatedGradient, SemanticGradient};
use crate::runtime::Trajectory;
use crate::similarity::Similarity;
use crate::skill::{Skill, SkillId, SkillPool, Tokenizer};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaintenanceError {
    #[error("skill {skill} is not active in episode {episode}")]
    SkillAbsent { skill: SkillId, episode: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Mean of `r_t - step_baseline` over the skill's active steps.
    #[default]
    PerStep,
    /// `(R - return_baseline) / |trajectory|`, the same for every active step.
    TrajectoryLevel,
}

pub fn skill_gain(
    trajectory: &Trajectory,
    skill: SkillId,
    step_baseline: f64,
    mode: RewardMode,
    return_baseline: f64,
) -> Result<f64, MaintenanceError> {
    let active = trajectory.active_steps(skill);
    if active.is_empty() {
        return Err(MaintenanceError::SkillAbsent {
            skill,
            episode: trajectory.episode_id,
        });
    }
    Ok(match mode {
        RewardMode::PerStep => {
            active
                .iter()
                .map(|&i| trajectory.steps[i].reward - step_baseline)
                .sum::<f64>()
                / active.len() as f64
        }
        RewardMode::TrajectoryLevel => (trajectory.total_return - return_baseline) / trajectory.steps.len() as f64,
    })
}

/// Accumulates gains and selection counts for every skill used in `batch`,
/// moves the step baseline and advances the batch index.
pub fn update_scores(pool: &mut SkillPool, batch: &[Trajectory], mode: RewardMode, alpha: f64) {
    let step_baseline = pool.step_baseline;
    let return_baseline = pool.return_baseline;
    for skill in pool.skills_mut() {
        for traj in batch {
            if let Ok(g) = skill_gain(traj, skill.id, step_baseline, mode, return_baseline) {
                skill.cum_gain += g;
                skill.invocations += traj.selection_count(skill.id);
            }
        }
    }
    let rewards: Vec<f64> = batch.iter().flat_map(|t| t.steps.iter().map(|s| s.reward)).collect();
    pool.step_baseline = gate::ema_update(step_baseline, &rewards, alpha);
    pool.batch_index += 1;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum PruneReason {
    NonPositiveScore,
    Redundant { kept: SkillId, similarity: f64 },
    OverCapacity,
    Fifo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub skill: SkillId,
    pub name: String,
    pub version: u32,
    pub score: f64,
    #[serde(flatten)]
    pub reason: PruneReason,
}

fn event(skill: &Skill, reason: PruneReason) -> PruneEvent {
    PruneEvent {
        skill: skill.id,
        name: skill.name.clone(),
        version: skill.version,
        score: skill.online_score(),
        reason,
    }
}

/// Orders skills worst first: lower score, then higher id.
fn worse_first(a: &Skill, b: &Skill) -> std::cmp::Ordering {
    a.online_score().total_cmp(&b.online_score()).then(b.id.cmp(&a.id))
}

/// Score-based maintenance. Rules run in order: drop used skills with a
/// non-positive score, drop the weaker member of each redundant pair, then
/// drop the weakest until the pool fits its capacity. The pool never
/// empties.
pub fn prune(pool: &mut SkillPool, sim: &dyn Similarity, redundancy_threshold: f64) -> Vec<PruneEvent> {
    let mut events = Vec::new();

    let mut failing: Vec<Skill> = pool
        .skills()
        .iter()
        .filter(|s| !s.is_fresh() && s.online_score() <= 0.0)
        .cloned()
        .collect();
    if failing.len() == pool.len() {
        // Keep the best of them.
        failing.sort_by(worse_first);
        failing.pop();
    }
    for s in failing {
        pool.remove(s.id);
        events.push(event(&s, PruneReason::NonPositiveScore));
    }

    loop {
        let skills = pool.skills();
        let mut found = None;
        'outer: for i in 0..skills.len() {
            for j in i + 1..skills.len() {
                let similarity = sim.similarity(&skills[i].initiation, &skills[j].initiation);
                if similarity >= redundancy_threshold {
                    let (loser, winner) = if worse_first(&skills[i], &skills[j]).is_lt() {
                        (&skills[i], &skills[j])
                    } else {
                        (&skills[j], &skills[i])
                    };
                    found = Some((loser.clone(), winner.id, similarity));
                    break 'outer;
                }
            }
        }
        let Some((loser, kept, similarity)) = found else { break };
        pool.remove(loser.id);
        events.push(event(&loser, PruneReason::Redundant { kept, similarity }));
    }

    while pool.len() > pool.capacity() {
        let worst = pool
            .skills()
            .iter()
            .min_by(|a, b| worse_first(a, b))
            .cloned()
            .expect("pool over capacity is non-empty");
        pool.remove(worst.id);
        events.push(event(&worst, PruneReason::OverCapacity));
    }
    events
}

/// Ablation: evict oldest first (smallest created batch, then lowest id).
pub fn prune_fifo(pool: &mut SkillPool) -> Vec<PruneEvent> {
    let mut events = Vec::new();
    while pool.len() > pool.capacity() {
        let oldest = pool
            .skills()
            .iter()
            .min_by_key(|s| (s.created_batch, s.id))
            .cloned()
            .expect("pool over capacity is non-empty");
        pool.remove(oldest.id);
        events.push(event(&oldest, PruneReason::Fifo));
    }
    events
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Admit every skill's best candidate regardless of its surrogate.
    pub no_gate: bool,
    /// Evict by age instead of score.
    pub fifo: bool,
    /// Evolve from neutral trajectory summaries instead of gradients.
    pub no_sg: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvolveParams {
    pub n_candidates: usize,
    pub redundancy_threshold: f64,
    pub reward_mode: RewardMode,
    pub gate: GateParams,
    pub ablation: Ablation,
    /// Extra attempts for unparseable doctor, evolver and summarizer replies.
    pub parse_retries: u32,
}

impl Default for EvolveParams {
    fn default() -> Self {
        Self {
            n_candidates: 3,
            redundancy_threshold: 0.9,
            reward_mode: RewardMode::PerStep,
            gate: GateParams::default(),
            ablation: Ablation::default(),
            parse_retries: 2,
        }
    }
}

pub struct EvolveContext<'a> {
    pub backends: &'a Backends,
    pub similarity: &'a dyn Similarity,
    pub tokenizer: &'a dyn Tokenizer,
    pub params: EvolveParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceAudit {
    pub skill: SkillId,
    pub gradients: Vec<SemanticGradient>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregated: Option<AggregatedGradient>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub summaries: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateAudit {
    pub parent: SkillId,
    pub candidates: Vec<Skill>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Admission {
    pub parent: SkillId,
    pub child: SkillId,
    pub name: String,
    pub version: u32,
    pub surrogate: Option<f64>,
    /// False when the gate was bypassed.
    pub gated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub step_before: f64,
    pub step_after: f64,
    pub return_before: f64,
    pub return_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineError {
    pub skill: SkillId,
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub batch_index: u64,
    pub invoked_skills: Vec<SkillId>,
    pub gradients: Vec<GuidanceAudit>,
    pub candidates: Vec<CandidateAudit>,
    pub gate_reports: Vec<GateReport>,
    pub admissions: Vec<Admission>,
    pub prunings: Vec<PruneEvent>,
    pub baselines: Baselines,
    pub errors: Vec<PipelineError>,
    /// Skills whose candidates reached the gate.
    pub gated_skills: usize,
    /// Admissions over gated skills; absent when nothing reached the gate.
    pub gate_pass_rate: Option<f64>,
    pub mean_return: f64,
    pub pool_size: usize,
    pub mean_online_score: f64,
}

enum Prepared {
    Guidance(Guidance, GuidanceAudit),
    Skip(GuidanceAudit, PipelineError),
}

fn prepare_guidance(parent: &Skill, batch: &[Trajectory], ctx: &EvolveContext<'_>) -> Prepared {
    let retries = ctx.params.parse_retries;
    let used: Vec<&Trajectory> = batch.iter().filter(|t| !t.active_steps(parent.id).is_empty()).collect();
    let mut audit = GuidanceAudit {
        skill: parent.id,
        gradients: Vec::new(),
        aggregated: None,
        summaries: Vec::new(),
    };
    let skip = |audit, stage: &str, message: String| {
        Prepared::Skip(
            audit,
            PipelineError {
                skill: parent.id,
                stage: stage.into(),
                message,
            },
        )
    };
    if ctx.params.ablation.no_sg {
        let results: Vec<_> = used
            .par_iter()
            .map(|t| gradient::summarize_trajectory(t, ctx.backends.summarizer.as_ref(), retries))
            .collect();
        let mut failures = Vec::new();
        for r in results {
            match r {
                Ok(s) => audit.summaries.push(s),
                Err(e) => failures.push(e.to_string()),
            }
        }
        if audit.summaries.is_empty() {
            return skip(audit, "summarize", failures.join("; "));
        }
        let guidance = Guidance::Summaries {
            summaries: audit.summaries.clone(),
        };
        return Prepared::Guidance(guidance, audit);
    }
    let results: Vec<_> = used
        .par_iter()
        .map(|t| gradient::extract_gradient(t, parent, ctx.backends.doctor.as_ref(), retries))
        .collect();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(g) => audit.gradients.push(g),
            Err(e) => failures.push(e.to_string()),
        }
    }
    if audit.gradients.is_empty() {
        return skip(audit, "extract_gradient", failures.join("; "));
    }
    for f in failures {
        log::warn!("gradient for skill {} dropped: {f}", parent.id);
    }
    match gradient::aggregate_gradients(parent, &audit.gradients, ctx.backends.aggregator.as_ref()) {
        Ok(agg) => {
            audit.aggregated = Some(agg.clone());
            if agg.is_empty() {
                return skip(audit, "aggregate", "no update direction".into());
            }
            Prepared::Guidance(Guidance::Gradient(agg), audit)
        }
        Err(e) => skip(audit, "aggregate", e.to_string()),
    }
}

/// Admits `child`, renaming it when its (name, version) is already taken.
fn admit(pool: &mut SkillPool, mut child: Skill, tokenizer: &dyn Tokenizer) -> Skill {
    if pool.contains_name_version(&child.name, child.version) {
        child.name = format!("{}_{}", child.name, child.id.0);
        child.token_count = tokenizer.count(&child.render()) as u64;
    }
    pool.insert(child.clone()).expect("fresh id and unique name");
    child
}

/// One application of the evolution operator on a batch collected under
/// `pool`. Per-skill failures are recorded in the audit and never abort the
/// batch.
pub fn evolve(pool: &mut SkillPool, batch: &[Trajectory], ctx: &EvolveContext<'_>) -> AuditRecord {
    let params = ctx.params;
    let snapshot = pool.clone();
    let batch_index = pool.batch_index;
    let invoked: BTreeSet<SkillId> = batch
        .iter()
        .flat_map(|t| t.invoked_skills())
        .filter(|id| snapshot.get(*id).is_some())
        .collect();
    let mut record = AuditRecord {
        batch_index,
        invoked_skills: invoked.iter().copied().collect(),
        gradients: Vec::new(),
        candidates: Vec::new(),
        gate_reports: Vec::new(),
        admissions: Vec::new(),
        prunings: Vec::new(),
        baselines: Baselines {
            step_before: pool.step_baseline,
            step_after: pool.step_baseline,
            return_before: pool.return_baseline,
            return_after: pool.return_baseline,
        },
        errors: Vec::new(),
        gated_skills: 0,
        gate_pass_rate: None,
        mean_return: 0.0,
        pool_size: 0,
        mean_online_score: 0.0,
    };

    for id in &invoked {
        let parent = snapshot.get(*id).expect("invoked skills are in the snapshot");
        let guidance = match prepare_guidance(parent, batch, ctx) {
            Prepared::Guidance(g, audit) => {
                record.gradients.push(audit);
                g
            }
            Prepared::Skip(audit, err) => {
                log::info!("skill {} skipped at {}: {}", parent.id, err.stage, err.message);
                record.gradients.push(audit);
                record.errors.push(err);
                continue;
            }
        };
        let candidates = match gradient::apply_gradient(
            parent,
            &guidance,
            ctx.backends.evolver.as_ref(),
            params.n_candidates,
            pool,
            ctx.tokenizer,
            params.parse_retries,
        ) {
            Ok(c) => c,
            Err(e) => {
                record.errors.push(PipelineError {
                    skill: parent.id,
                    stage: "apply_gradient".into(),
                    message: e.to_string(),
                });
                continue;
            }
        };
        record.candidates.push(CandidateAudit {
            parent: parent.id,
            candidates: candidates.clone(),
        });
        let mut outcome = gate::gate_select(
            &candidates,
            parent,
            batch,
            &snapshot,
            ctx.backends.policy.as_ref(),
            &params.gate,
            snapshot.return_baseline,
            batch_index,
        );
        record.gated_skills += 1;
        let chosen = if params.ablation.no_gate {
            let i = best_report(&outcome.reports).unwrap_or(0);
            for (k, r) in outcome.reports.iter_mut().enumerate() {
                r.accepted = k == i;
            }
            Some(i)
        } else {
            outcome
                .accepted
                .and_then(|cid| candidates.iter().position(|c| c.id == cid))
        };
        for r in outcome.reports.iter().filter(|r| r.error.is_some()) {
            record.errors.push(PipelineError {
                skill: parent.id,
                stage: "gate".into(),
                message: format!("candidate {}: {}", r.candidate, r.error.as_deref().unwrap_or("")),
            });
        }
        if let Some(i) = chosen {
            let surrogate = outcome.reports[i].surrogate;
            let child = admit(pool, candidates[i].clone(), ctx.tokenizer);
            record.admissions.push(Admission {
                parent: parent.id,
                child: child.id,
                name: child.name.clone(),
                version: child.version,
                surrogate,
                gated: !params.ablation.no_gate,
            });
        }
        record.gate_reports.extend(outcome.reports);
    }

    let returns: Vec<f64> = batch.iter().map(|t| t.total_return).collect();
    update_scores(pool, batch, params.reward_mode, params.gate.alpha);
    pool.return_baseline = gate::update_return_baseline(pool.return_baseline, &returns, params.gate.alpha);
    record.baselines.step_after = pool.step_baseline;
    record.baselines.return_after = pool.return_baseline;

    record.prunings = if params.ablation.fifo {
        prune_fifo(pool)
    } else {
        prune(pool, ctx.similarity, params.redundancy_threshold)
    };

    if record.gated_skills > 0 {
        record.gate_pass_rate = Some(record.admissions.len() as f64 / record.gated_skills as f64);
    }
    if !returns.is_empty() {
        record.mean_return = returns.iter().sum::<f64>() / returns.len() as f64;
    }
    record.pool_size = pool.len();
    record.mean_online_score = mean_online_score(pool);
    record
}

pub fn mean_online_score(pool: &SkillPool) -> f64 {
    if pool.is_empty() {
        return 0.0;
    }
    pool.skills().iter().map(Skill::online_score).sum::<f64>() / pool.len() as f64
}

/// True when the parent chain of `skill`, looked up in `known`, ends at a
/// parent-less version-1 skill with versions stepping by one.
pub fn lineage_terminates(skill: &Skill, known: &[Skill]) -> bool {
    let mut current = skill.clone();
    let mut seen = BTreeSet::new();
    loop {
        if !seen.insert(current.id) {
            return false;
        }
        match current.parent_id {
            None => return current.version == 1,
            Some(pid) => match known.iter().find(|s| s.id == pid) {
                Some(p) if p.version + 1 == current.version => current = p.clone(),
                _ => return false,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvState;
    use crate::runtime::Step;
    use crate::similarity::JaccardSimilarity;
    use crate::skill::{SkillDraft, WhitespaceTokenizer};

    fn traj(id: u64, steps: &[(u64, f64, bool)]) -> Trajectory {
        let mut prev_done = true;
        let steps: Vec<Step> = steps
            .iter()
            .enumerate()
            .map(|(i, &(skill, reward, done))| {
                let s = Step {
                    state: EnvState {
                        text: format!("s{i}"),
                        admissible: None,
                        terminal: false,
                        step_index: i as u64,
                    },
                    skill_id: SkillId(skill),
                    action: "a".into(),
                    behavior_logprob: 0.0,
                    reward,
                    skill_started: prev_done,
                    skill_terminated: done,
                    prompt: None,
                };
                prev_done = done;
                s
            })
            .collect();
        Trajectory {
            episode_id: id,
            total_return: steps.iter().map(|s| s.reward).sum(),
            steps,
            env_name: "test".into(),
            backend_name: "test".into(),
            final_state: None,
        }
    }

    fn pool_with(scores: &[(f64, u64)], capacity: usize, inits: &[&str]) -> SkillPool {
        let drafts = inits
            .iter()
            .enumerate()
            .map(|(i, init)| SkillDraft::new(format!("S{i}"), *init, vec!["act".into()], "stop"))
            .collect();
        let mut pool = SkillPool::from_drafts(16, drafts, &WhitespaceTokenizer).unwrap();
        for (s, &(g, n)) in pool.skills_mut().zip(scores) {
            s.cum_gain = g;
            s.invocations = n;
        }
        // insert() does not enforce capacity, so this can build an overfull pool.
        let mut sized = SkillPool::new(capacity).unwrap();
        for s in pool.skills() {
            sized.insert(s.clone()).unwrap();
        }
        sized
    }

    #[test]
    fn gain_examples() {
        let t = traj(0, &[(1, 1.0, false), (1, 3.0, true)]);
        assert_eq!(skill_gain(&t, SkillId(1), 0.0, RewardMode::PerStep, 0.0).unwrap(), 2.0);
        assert_eq!(skill_gain(&t, SkillId(1), 2.0, RewardMode::PerStep, 0.0).unwrap(), 0.0);
        let t = traj(0, &[(1, 2.0, true), (2, 0.0, false), (2, 0.0, false), (2, 0.0, true)]);
        assert_eq!(
            skill_gain(&t, SkillId(1), 0.0, RewardMode::TrajectoryLevel, 1.0).unwrap(),
            0.25
        );
        assert_eq!(
            skill_gain(&t, SkillId(2), 0.0, RewardMode::TrajectoryLevel, 1.0).unwrap(),
            0.25
        );
        assert!(skill_gain(&t, SkillId(9), 0.0, RewardMode::PerStep, 0.0).is_err());
    }

    #[test]
    fn update_scores_sums_and_counts() {
        let mut pool = pool_with(&[], 4, &["a", "b"]);
        let batch = vec![traj(0, &[(1, 0.3, true)]), traj(1, &[(1, -0.1, true)])];
        update_scores(&mut pool, &batch, RewardMode::PerStep, 0.1);
        let s = pool.get(SkillId(1)).unwrap();
        assert!((s.cum_gain - 0.2).abs() < 1e-12);
        assert_eq!(s.invocations, 2);
        assert_eq!(pool.get(SkillId(2)).unwrap().invocations, 0);
        assert_eq!(pool.batch_index, 1);
        update_scores(&mut pool, &[], RewardMode::PerStep, 0.1);
        assert_eq!(pool.batch_index, 2);
    }

    #[test]
    fn prune_rule_walkthrough() {
        let mut pool = pool_with(
            &[(0.3, 1), (0.1, 1), (-0.2, 1)],
            2,
            &["alpha one", "beta two", "gamma three"],
        );
        let events = prune(&mut pool, &JaccardSimilarity, 0.9);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].skill, SkillId(3));
        assert_eq!(events[0].reason, PruneReason::NonPositiveScore);
        assert_eq!(pool.len(), 2);
    }

    #[test]
    fn prune_redundancy_fresh_and_last_survivor() {
        let mut pool = pool_with(&[(0.1, 1), (0.5, 1)], 4, &["same words", "same words"]);
        prune(&mut pool, &JaccardSimilarity, 0.9);
        assert_eq!(pool.ids(), vec![SkillId(2)]);

        let mut pool = pool_with(&[(0.0, 0)], 4, &["fresh"]);
        assert!(prune(&mut pool, &JaccardSimilarity, 0.9).is_empty());

        let mut pool = pool_with(&[(-1.0, 1), (-0.5, 2)], 4, &["x", "y"]);
        prune(&mut pool, &JaccardSimilarity, 0.9);
        assert_eq!(pool.ids(), vec![SkillId(2)]);
    }

    #[test]
    fn capacity_prune_breaks_ties_by_higher_id() {
        let mut pool = pool_with(&[(0.2, 1), (0.2, 1), (0.2, 1)], 2, &["p", "q", "r"]);
        let events = prune(&mut pool, &JaccardSimilarity, 0.9);
        assert_eq!(events[0].skill, SkillId(3));
        assert_eq!(events[0].reason, PruneReason::OverCapacity);
    }

    #[test]
    fn fifo_evicts_oldest() {
        let mut pool = pool_with(&[], 2, &["p", "q", "r"]);
        for (s, b) in pool.skills_mut().zip([2, 0, 1]) {
            s.created_batch = b;
        }
        let events = prune_fifo(&mut pool);
        assert_eq!(events.iter().map(|e| e.skill).collect::<Vec<_>>(), vec![SkillId(2)]);
        let mut same = pool_with(&[], 2, &["p", "q", "r"]);
        assert_eq!(prune_fifo(&mut same)[0].skill, SkillId(1));
        let mut fits = pool_with(&[], 3, &["p", "q", "r"]);
        assert!(prune_fifo(&mut fits).is_empty());
    }

    #[test]
    fn lineage_check() {
        let tok = WhitespaceTokenizer;
        let root = Skill::new(
            SkillId(1),
            SkillDraft::new("R", "i", vec!["s".into()], "t"),
            None,
            0,
            &tok,
        )
        .unwrap();
        let child = Skill::new(SkillId(2), root.draft(), Some(&root), 1, &tok).unwrap();
        assert!(lineage_terminates(&child, &[root.clone(), child.clone()]));
        assert!(!lineage_terminates(&child, std::slice::from_ref(&child)));
    }
}
