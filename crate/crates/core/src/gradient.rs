//! Semantic gradients: per-trajectory diagnosis, batch consolidation and the
//! text update that turns a skill plus a direction into candidate children.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    BackendError, DoctorRequest, EvolveRequest, GradientAggregator, Guidance, SkillDoctor, SkillEvolver,
    TrajectorySummarizer,
};
use crate::runtime::Trajectory;
use crate::skill::{Skill, SkillDraft, SkillError, SkillId, SkillPool, Tokenizer};

#[derive(Debug, Error)]
pub enum GradientError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("unparseable reply after {attempts} attempt(s): {message}")]
    Protocol {
        message: String,
        raw: String,
        attempts: u32,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("no parseable candidate for skill {skill}: {last_error}")]
    Evolution { skill: SkillId, last_error: String },
    #[error(transparent)]
    Skill(#[from] SkillError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticGradient {
    pub diagnosis: String,
    pub is_related: bool,
    pub g_initiation: String,
    pub g_policy: String,
    pub g_termination: String,
    pub source_episode: u64,
}

/// Wire shape of a doctor reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientReply {
    pub diagnosis: String,
    pub is_related: bool,
    pub semantic_gradient: GradientComponents,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientComponents {
    pub initiation: String,
    pub policy: String,
    pub termination: String,
}

impl SemanticGradient {
    /// Parses a doctor reply (bare or fenced JSON). An unrelated verdict
    /// clears every component.
    pub fn parse_reply(raw: &str, source_episode: u64) -> Result<Self, String> {
        let body = extract_json_object(raw).ok_or("no JSON object in reply")?;
        let reply: GradientReply = serde_json::from_str(body).map_err(|e| e.to_string())?;
        if reply.diagnosis.trim().is_empty() {
            return Err("empty diagnosis".into());
        }
        let c = reply.semantic_gradient;
        let (gi, gp, gt) = if reply.is_related {
            (c.initiation, c.policy, c.termination)
        } else {
            Default::default()
        };
        Ok(Self {
            diagnosis: reply.diagnosis,
            is_related: reply.is_related,
            g_initiation: gi,
            g_policy: gp,
            g_termination: gt,
            source_episode,
        })
    }

    pub fn to_reply(&self) -> GradientReply {
        GradientReply {
            diagnosis: self.diagnosis.clone(),
            is_related: self.is_related,
            semantic_gradient: GradientComponents {
                initiation: self.g_initiation.clone(),
                policy: self.g_policy.clone(),
                termination: self.g_termination.clone(),
            },
        }
    }

    pub fn is_empty(&self) -> bool {
        self.g_initiation.is_empty() && self.g_policy.is_empty() && self.g_termination.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregatedGradient {
    pub g_initiation: String,
    pub g_policy: String,
    pub g_termination: String,
    pub contributing: Vec<u64>,
    pub dropped: Vec<u64>,
}

impl AggregatedGradient {
    /// No update direction in any component.
    pub fn is_empty(&self) -> bool {
        self.g_initiation.trim().is_empty() && self.g_policy.trim().is_empty() && self.g_termination.trim().is_empty()
    }

    /// Text listing used by prompt-driven evolvers.
    pub fn describe(&self) -> String {
        let show = |s: &str| {
            if s.trim().is_empty() {
                "(no change)".to_string()
            } else {
                s.to_string()
            }
        };
        format!(
            "initiation: {}\npolicy: {}\ntermination: {}",
            show(&self.g_initiation),
            show(&self.g_policy),
            show(&self.g_termination)
        )
    }
}

/// Returns the JSON object inside a ```json fence, or the outermost `{...}`.
pub fn extract_json_object(raw: &str) -> Option<&str> {
    if let Some(fence) = raw.find("```") {
        let after = &raw[fence + 3..];
        let body_start = after.find('\n').map_or(0, |i| i + 1);
        let body = &after[body_start..];
        if let Some(close) = body.find("```") {
            let inner = body[..close].trim();
            if inner.starts_with('{') {
                return Some(inner);
            }
        }
    }
    let start = raw.find('{')?;
    let end = raw.rfind('}')?;
    (end > start).then(|| &raw[start..=end])
}

/// Steps where `skill` was active, rendered for the doctor.
pub fn segment_transcript(trajectory: &Trajectory, skill: SkillId) -> Option<String> {
    let mut out = Vec::new();
    for (t, step) in trajectory.steps.iter().enumerate() {
        if step.skill_id != skill {
            continue;
        }
        out.push(format!(
            "[t={t}] STATE:\n{}\nACTION: {}\nREWARD: {}",
            step.state.text, step.action, step.reward
        ));
    }
    if out.is_empty() {
        return None;
    }
    let last_active = trajectory.steps.iter().rposition(|s| s.skill_id == skill)?;
    let next = trajectory
        .steps
        .get(last_active + 1)
        .map(|s| &s.state)
        .or(trajectory.final_state.as_ref());
    if let Some(next) = next {
        out.push(format!("[after] STATE:\n{}", next.text));
    }
    Some(out.join("\n\n"))
}

/// Whole-episode transcript, used by the summarizer.
pub fn full_transcript(trajectory: &Trajectory) -> String {
    let mut out: Vec<String> = trajectory
        .steps
        .iter()
        .enumerate()
        .map(|(t, s)| {
            format!(
                "[t={t}] STATE:\n{}\nACTION: {}\nREWARD: {}",
                s.state.text, s.action, s.reward
            )
        })
        .collect();
    if let Some(fin) = &trajectory.final_state {
        out.push(format!("[end] STATE:\n{}", fin.text));
    }
    out.join("\n\n")
}

fn with_parse_retries<T>(
    retries: u32,
    mut call: impl FnMut() -> Result<String, BackendError>,
    parse: impl Fn(&str) -> Result<T, String>,
) -> Result<T, GradientError> {
    let mut last = (String::new(), String::new());
    for _ in 0..=retries {
        let raw = call()?;
        match parse(&raw) {
            Ok(v) => return Ok(v),
            Err(message) => {
                log::debug!("reply rejected: {message}");
                last = (message, raw);
            }
        }
    }
    Err(GradientError::Protocol {
        message: last.0,
        raw: last.1,
        attempts: retries + 1,
    })
}

/// Hindsight attribution for one trajectory. `retries` counts extra attempts
/// on unparseable replies.
pub fn extract_gradient(
    trajectory: &Trajectory,
    skill: &Skill,
    doctor: &dyn SkillDoctor,
    retries: u32,
) -> Result<SemanticGradient, GradientError> {
    let transcript = segment_transcript(trajectory, skill.id).ok_or_else(|| {
        GradientError::Precondition(format!(
            "skill {} was never active in episode {}",
            skill.id, trajectory.episode_id
        ))
    })?;
    let request = DoctorRequest {
        skill,
        transcript: &transcript,
        reward: trajectory.total_return,
    };
    with_parse_retries(
        retries,
        || doctor.diagnose(&request),
        |raw| SemanticGradient::parse_reply(raw, trajectory.episode_id),
    )
}

pub fn aggregate_gradients(
    skill: &Skill,
    gradients: &[SemanticGradient],
    aggregator: &dyn GradientAggregator,
) -> Result<AggregatedGradient, GradientError> {
    if gradients.is_empty() {
        return Err(GradientError::Precondition("no gradients to aggregate".into()));
    }
    Ok(aggregator.aggregate(skill, gradients)?)
}

/// Wire shape of an evolver reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateReply {
    pub skill_name: String,
    pub initiation: String,
    pub policy: Vec<String>,
    pub termination: String,
}

impl CandidateReply {
    pub fn parse(raw: &str) -> Result<SkillDraft, String> {
        let body = extract_json_object(raw).ok_or("no JSON object in reply")?;
        let c: CandidateReply = serde_json::from_str(body).map_err(|e| e.to_string())?;
        let draft = SkillDraft::new(c.skill_name.trim(), c.initiation, c.policy, c.termination);
        draft.validate().map_err(|e| e.to_string())?;
        Ok(draft)
    }

    pub fn from_draft(d: &SkillDraft) -> Self {
        Self {
            skill_name: d.name.clone(),
            initiation: d.initiation.clone(),
            policy: d.policy_steps.clone(),
            termination: d.termination.clone(),
        }
    }
}

/// Asks the evolver for `n_candidates` children of `skill`. Candidates that
/// stay unparseable after retries are skipped; zero survivors is an error.
/// Children get fresh ids from `pool` but are not inserted.
#[allow(clippy::too_many_arguments)]
pub fn apply_gradient(
    skill: &Skill,
    guidance: &Guidance,
    evolver: &dyn SkillEvolver,
    n_candidates: usize,
    pool: &mut SkillPool,
    tokenizer: &dyn Tokenizer,
    retries: u32,
) -> Result<Vec<Skill>, GradientError> {
    if n_candidates == 0 {
        return Err(GradientError::Precondition("n_candidates must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(n_candidates);
    let mut last_error = String::new();
    for index in 1..=n_candidates {
        let request = EvolveRequest {
            parent: skill,
            guidance,
            candidate_index: index,
            n_candidates,
        };
        match with_parse_retries(retries, || evolver.evolve(&request), CandidateReply::parse) {
            Ok(draft) => out.push(pool.mint(draft, Some(skill), tokenizer)?),
            Err(e) => {
                log::warn!("candidate {index} for skill {} dropped: {e}", skill.id);
                last_error = e.to_string();
            }
        }
    }
    if out.is_empty() {
        return Err(GradientError::Evolution {
            skill: skill.id,
            last_error,
        });
    }
    Ok(out)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SummaryReply {
    summary: String,
}

pub fn summarize_trajectory(
    trajectory: &Trajectory,
    summarizer: &dyn TrajectorySummarizer,
    retries: u32,
) -> Result<String, GradientError> {
    if trajectory.steps.is_empty() {
        return Err(GradientError::Precondition(format!(
            "episode {} has no steps to summarize",
            trajectory.episode_id
        )));
    }
    let transcript = full_transcript(trajectory);
    with_parse_retries(
        retries,
        || summarizer.summarize(&transcript, trajectory.total_return),
        |raw| {
            let body = extract_json_object(raw).ok_or("no JSON object in reply")?;
            let reply: SummaryReply = serde_json::from_str(body).map_err(|e| e.to_string())?;
            if reply.summary.trim().is_empty() {
                return Err("empty summary".into());
            }
            Ok(reply.summary)
        },
    )
}
