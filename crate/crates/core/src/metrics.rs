//! Reuse and efficiency metrics over pool snapshots and trajectory logs.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::runtime::Trajectory;
use crate::skill::{Skill, SkillId, Tokenizer};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
}

/// One selection of a skill.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageEvent {
    pub skill: SkillId,
    pub task: String,
    pub agent: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageLog {
    pub events: Vec<UsageEvent>,
}

impl UsageLog {
    /// One event per selection step, tagged with the trajectory's environment
    /// and backend.
    pub fn from_trajectories<'a>(trajectories: impl IntoIterator<Item = &'a Trajectory>) -> Self {
        let mut log = Self::default();
        log.extend(trajectories);
        log
    }

    pub fn extend<'a>(&mut self, trajectories: impl IntoIterator<Item = &'a Trajectory>) {
        for t in trajectories {
            for s in t.steps.iter().filter(|s| s.skill_started) {
                self.events.push(UsageEvent {
                    skill: s.skill_id,
                    task: t.env_name.clone(),
                    agent: t.backend_name.clone(),
                });
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scope", rename_all = "snake_case")]
pub enum ReuseScope {
    InDomain,
    /// Used in a task other than the one the pool was learned on.
    CrossTask {
        learned_task: String,
    },
    /// Used by an agent other than the one that learned the pool.
    CrossAgent {
        learned_agent: String,
    },
}

/// Fraction of stored skills with at least one qualifying use.
pub fn reuse_rate(pool: &[Skill], usage: &UsageLog, scope: &ReuseScope) -> Result<f64, MetricError> {
    if pool.is_empty() {
        return Err(MetricError::Undefined("reuse rate of an empty pool"));
    }
    let used: BTreeSet<SkillId> = usage
        .events
        .iter()
        .filter(|e| match scope {
            ReuseScope::InDomain => true,
            ReuseScope::CrossTask { learned_task } => &e.task != learned_task,
            ReuseScope::CrossAgent { learned_agent } => &e.agent != learned_agent,
        })
        .map(|e| e.skill)
        .collect();
    let hits = pool.iter().filter(|s| used.contains(&s.id)).count();
    Ok(hits as f64 / pool.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StorageMetrics {
    pub total_stored_tokens: u64,
    /// Absent for an empty pool.
    pub avg_tokens_per_unit: Option<f64>,
}

impl StorageMetrics {
    pub fn average(&self) -> Result<f64, MetricError> {
        self.avg_tokens_per_unit
            .ok_or(MetricError::Undefined("average tokens of an empty pool"))
    }
}

pub fn storage_metrics(pool: &[Skill]) -> StorageMetrics {
    let total: u64 = pool.iter().map(|s| s.token_count).sum();
    StorageMetrics {
        total_stored_tokens: total,
        avg_tokens_per_unit: (!pool.is_empty()).then(|| total as f64 / pool.len() as f64),
    }
}

/// Selection steps over all steps.
pub fn retrieval_ratio(trajectories: &[Trajectory]) -> Result<f64, MetricError> {
    let (mut selections, mut total) = (0usize, 0usize);
    for t in trajectories {
        total += t.steps.len();
        selections += t.steps.iter().filter(|s| s.skill_started).count();
    }
    if total == 0 {
        return Err(MetricError::Undefined("retrieval ratio over zero steps"));
    }
    Ok(selections as f64 / total as f64)
}

/// Mean of `tokens(prompt) - tokens(state)` per step.
pub fn delta_prompt_tokens(trajectories: &[Trajectory], tokenizer: &dyn Tokenizer) -> Result<f64, MetricError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in trajectories {
        for s in &t.steps {
            let prompt = s
                .prompt
                .as_ref()
                .ok_or(MetricError::Undefined("prompt delta without recorded prompts"))?;
            sum += tokenizer.count(prompt) as f64 - tokenizer.count(&s.state.text) as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(MetricError::Undefined("prompt delta over zero steps"));
    }
    Ok(sum / n as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skill::{SkillDraft, WhitespaceTokenizer};

    fn skills(n: u64) -> Vec<Skill> {
        (1..=n)
            .map(|i| {
                let d = SkillDraft::new(format!("S{i}"), "when", vec!["do".into()], "stop");
                Skill::new(SkillId(i), d, None, 0, &WhitespaceTokenizer).unwrap()
            })
            .collect()
    }

    fn uses(ids: &[u64], task: &str, agent: &str) -> UsageLog {
        UsageLog {
            events: ids
                .iter()
                .map(|&i| UsageEvent {
                    skill: SkillId(i),
                    task: task.into(),
                    agent: agent.into(),
                })
                .collect(),
        }
    }

    #[test]
    fn reuse_hand_counts() {
        let pool = skills(4);
        let log = uses(&[1, 2, 2, 3], "Mastermind-v0", "m1");
        assert_eq!(reuse_rate(&pool, &log, &ReuseScope::InDomain).unwrap(), 0.75);
        assert_eq!(
            reuse_rate(&pool, &UsageLog::default(), &ReuseScope::InDomain).unwrap(),
            0.0
        );
        assert_eq!(
            reuse_rate(&pool, &uses(&[1, 2, 3, 4], "t", "a"), &ReuseScope::InDomain).unwrap(),
            1.0
        );
        let cross = ReuseScope::CrossTask {
            learned_task: "Mastermind-v0".into(),
        };
        assert_eq!(reuse_rate(&pool, &log, &cross).unwrap(), 0.0);
        let cross = ReuseScope::CrossAgent {
            learned_agent: "m0".into(),
        };
        assert_eq!(reuse_rate(&pool, &log, &cross).unwrap(), 0.75);
        assert!(reuse_rate(&[], &log, &ReuseScope::InDomain).is_err());
    }

    #[test]
    fn storage_hand_counts() {
        let mut pool = skills(2);
        pool[0].token_count = 100;
        pool[1].token_count = 104;
        let m = storage_metrics(&pool);
        assert_eq!(m.total_stored_tokens, 204);
        assert_eq!(m.average().unwrap(), 102.0);
        let empty = storage_metrics(&[]);
        assert_eq!(empty.total_stored_tokens, 0);
        assert!(empty.average().is_err());
    }

    #[test]
    fn mean_std_basic() {
        assert_eq!(mean_std(&[1.0]), Some((1.0, 0.0)));
        assert_eq!(mean_std(&[0.0, 2.0]), Some((1.0, 1.0)));
        assert_eq!(mean_std(&[]), None);
    }
}
