//! Model-facing roles: action policy, termination judge, skill doctor,
//! gradient aggregator, skill evolver, trajectory summarizer and embedder.
//!
//! Each role is a trait so the runtime can mix a remote chat endpoint with
//! deterministic scripted stand-ins.

pub mod prompts;
pub mod remote;
pub mod scripted;

use std::sync::{Arc, LazyLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::EnvState;
use crate::gradient::{AggregatedGradient, SemanticGradient};
use crate::skill::Skill;

pub use prompts::{PromptOverrides, PromptTemplates};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {message}")]
    Protocol { message: String, raw: String },
    #[error("capability not supported: {0}")]
    Capability(String),
}

impl BackendError {
    pub fn protocol(message: impl Into<String>, raw: impl Into<String>) -> Self {
        BackendError::Protocol {
            message: message.into(),
            raw: raw.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSample {
    pub action: String,
    /// Sum of token log-probabilities over the action span.
    pub logprob: f64,
    pub raw: String,
    /// The decision prompt that produced this sample.
    pub prompt: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionScore {
    pub logprob: f64,
    /// True when the backend could not teacher-force the action and fell back
    /// to a constrained completion.
    pub approximate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Status {
    Done,
    Continue,
}

static STATUS: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"<status>\s*([A-Za-z]+)\s*</status>").unwrap());

/// Strict status parsing: exactly one tag, value DONE or CONTINUE.
pub fn parse_status(raw: &str) -> Result<Status, BackendError> {
    let mut tags = STATUS.captures_iter(raw);
    let first = tags
        .next()
        .ok_or_else(|| BackendError::protocol("no <status> tag in judge reply", raw))?;
    if tags.next().is_some() {
        return Err(BackendError::protocol("more than one <status> tag", raw));
    }
    match &first[1] {
        "DONE" => Ok(Status::Done),
        "CONTINUE" => Ok(Status::Continue),
        other => Err(BackendError::protocol(format!("unknown status {other:?}"), raw)),
    }
}

/// Byte range of the content of the last `<action>...</action>` span.
pub fn action_span(raw: &str) -> Option<(usize, usize)> {
    let open = "<action>";
    let start = raw.rfind(open)? + open.len();
    let end = start + raw[start..].find("</action>")?;
    let content = &raw[start..end];
    let lead = content.len() - content.trim_start().len();
    let trail = content.len() - content.trim_end().len();
    if lead + trail >= content.len() {
        return None;
    }
    Some((start + lead, end - trail))
}

pub fn extract_action(raw: &str) -> Option<&str> {
    action_span(raw).map(|(a, b)| &raw[a..b])
}

pub trait ActionPolicy: Send + Sync {
    fn name(&self) -> &str;
    fn sample_action(&self, state: &EnvState, skill: &Skill) -> Result<ActionSample, BackendError>;
    /// log pi(action | prompt(state, skill)).
    fn action_logprob(&self, state: &EnvState, skill: &Skill, action: &str) -> Result<ActionScore, BackendError>;
}

pub trait TerminationJudge: Send + Sync {
    /// Raw judge reply.
    fn judge_raw(&self, state: &EnvState, skill: &Skill) -> Result<String, BackendError>;

    fn judge_termination(&self, state: &EnvState, skill: &Skill) -> Result<Status, BackendError> {
        parse_status(&self.judge_raw(state, skill)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DoctorRequest<'a> {
    pub skill: &'a Skill,
    pub transcript: &'a str,
    pub reward: f64,
}

pub trait SkillDoctor: Send + Sync {
    /// Raw reply expected to hold the gradient JSON.
    fn diagnose(&self, request: &DoctorRequest<'_>) -> Result<String, BackendError>;
}

pub trait GradientAggregator: Send + Sync {
    fn aggregate(&self, skill: &Skill, gradients: &[SemanticGradient]) -> Result<AggregatedGradient, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Guidance {
    Gradient(AggregatedGradient),
    Summaries { summaries: Vec<String> },
}

#[derive(Debug, Clone, Copy)]
pub struct EvolveRequest<'a> {
    pub parent: &'a Skill,
    pub guidance: &'a Guidance,
    /// 1-based.
    pub candidate_index: usize,
    pub n_candidates: usize,
}

pub trait SkillEvolver: Send + Sync {
    /// Raw reply expected to hold one skill as JSON.
    fn evolve(&self, request: &EvolveRequest<'_>) -> Result<String, BackendError>;
}

pub trait TrajectorySummarizer: Send + Sync {
    /// Raw reply expected to hold `{"summary": ...}`.
    fn summarize(&self, transcript: &str, reward: f64) -> Result<String, BackendError>;
}

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError>;
}

/// One implementation per role.
#[derive(Clone)]
pub struct Backends {
    pub policy: Arc<dyn ActionPolicy>,
    pub judge: Arc<dyn TerminationJudge>,
    pub doctor: Arc<dyn SkillDoctor>,
    pub aggregator: Arc<dyn GradientAggregator>,
    pub evolver: Arc<dyn SkillEvolver>,
    pub summarizer: Arc<dyn TrajectorySummarizer>,
    pub embedder: Option<Arc<dyn Embedder>>,
}

/// Consolidates gradients without a model: keeps related gradients, collapses
/// exact duplicates per component and joins the rest. Used with remote
/// evolvers, which do their own consolidation from the joined list.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConcatAggregator;

impl GradientAggregator for ConcatAggregator {
    fn aggregate(&self, _skill: &Skill, gradients: &[SemanticGradient]) -> Result<AggregatedGradient, BackendError> {
        let related: Vec<&SemanticGradient> = gradients.iter().filter(|g| g.is_related).collect();
        let join = |pick: fn(&SemanticGradient) -> &str| {
            let mut texts: Vec<&str> = related
                .iter()
                .map(|g| pick(g).trim())
                .filter(|t| !t.is_empty())
                .collect();
            texts.sort_unstable();
            texts.dedup();
            texts.join("\n")
        };
        let mut contributing: Vec<u64> = related.iter().map(|g| g.source_episode).collect();
        contributing.sort_unstable();
        contributing.dedup();
        Ok(AggregatedGradient {
            g_initiation: join(|g| &g.g_initiation),
            g_policy: join(|g| &g.g_policy),
            g_termination: join(|g| &g.g_termination),
            contributing,
            dropped: Vec::new(),
        })
    }
}
