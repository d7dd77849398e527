//! Skills and the capacity-bounded skill pool.
//!
//! A [`Skill`] is a natural-language procedure made of an activation
//! condition, an ordered list of execution steps and a termination condition.
//! Each skill also carries its lineage (`version`, `parent_id`) and the online
//! statistics used by pool maintenance (`cum_gain`, `invocations`).
//!
//! The [`SkillPool`] owns the skills together with the running baselines used
//! by the gate and the scorer. It persists to a strict JSON document.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier assigned by the pool. Ids are monotonically increasing, which
/// gives every tie-break in selection and pruning a total order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SkillId(pub u64);

impl fmt::Display for SkillId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum SkillError {
    #[error("skill field `{0}` must not be empty")]
    EmptyField(&'static str),
    #[error("invalid skill pool: {0}")]
    InvalidPool(String),
    #[error("skill pool parse error at line {line}, column {column} (byte offset {offset}): {message}")]
    Parse {
        line: usize,
        column: usize,
        offset: usize,
        message: String,
    },
}

/// Counts tokens in rendered skill text. Metrics only need the count to be
/// internally consistent, so the rule is pluggable.
pub trait Tokenizer: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// Whitespace-delimited word count.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

/// Rough byte-pair estimate: one token per `bytes_per_token` bytes of each
/// word, rounded up. Useful when comparing against subword-tokenized models.
#[derive(Debug, Clone, Copy)]
pub struct BytePairEstimate {
    pub bytes_per_token: usize,
}

impl Default for BytePairEstimate {
    fn default() -> Self {
        Self { bytes_per_token: 4 }
    }
}

impl Tokenizer for BytePairEstimate {
    fn count(&self, text: &str) -> usize {
        let per = self.bytes_per_token.max(1);
        text.split_whitespace().map(|w| w.len().div_ceil(per)).sum()
    }
}

/// The user-authored part of a skill: everything except identity, lineage and
/// statistics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillDraft {
    pub name: String,
    pub initiation: String,
    pub policy_steps: Vec<String>,
    pub termination: String,
}

impl SkillDraft {
    pub fn new(
        name: impl Into<String>,
        initiation: impl Into<String>,
        policy_steps: Vec<String>,
        termination: impl Into<String>,
    ) -> Self {
        Self {
            name: name.into(),
            initiation: initiation.into(),
            policy_steps,
            termination: termination.into(),
        }
    }

    pub fn validate(&self) -> Result<(), SkillError> {
        if self.name.trim().is_empty() {
            return Err(SkillError::EmptyField("name"));
        }
        if self.initiation.trim().is_empty() {
            return Err(SkillError::EmptyField("initiation"));
        }
        if self.policy_steps.is_empty() || self.policy_steps.iter().any(|s| s.trim().is_empty()) {
            return Err(SkillError::EmptyField("policy_steps"));
        }
        if self.termination.trim().is_empty() {
            return Err(SkillError::EmptyField("termination"));
        }
        Ok(())
    }
}

/// Field order here is the persisted field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Skill {
    pub id: SkillId,
    pub name: String,
    pub version: u32,
    pub parent_id: Option<SkillId>,
    pub created_batch: u64,
    pub initiation: String,
    pub policy_steps: Vec<String>,
    pub termination: String,
    pub cum_gain: f64,
    pub invocations: u64,
    pub token_count: u64,
}

impl Skill {
    /// Builds a validated skill. A child of `parent` gets `parent.version + 1`
    /// and records the parent's id; a root starts at version 1.
    pub fn new(
        id: SkillId,
        draft: SkillDraft,
        parent: Option<&Skill>,
        created_batch: u64,
        tokenizer: &dyn Tokenizer,
    ) -> Result<Self, SkillError> {
        draft.validate()?;
        let mut skill = Skill {
            id,
            name: draft.name,
            version: parent.map_or(1, |p| p.version + 1),
            parent_id: parent.map(|p| p.id),
            created_batch,
            initiation: draft.initiation,
            policy_steps: draft.policy_steps,
            termination: draft.termination,
            cum_gain: 0.0,
            invocations: 0,
            token_count: 0,
        };
        skill.token_count = tokenizer.count(&skill.render()) as u64;
        Ok(skill)
    }

    pub fn draft(&self) -> SkillDraft {
        SkillDraft {
            name: self.name.clone(),
            initiation: self.initiation.clone(),
            policy_steps: self.policy_steps.clone(),
            termination: self.termination.clone(),
        }
    }

    /// Text block injected into decision prompts.
    pub fn render(&self) -> String {
        render_skill_text(self)
    }

    /// `cum_gain / max(1, invocations)`.
    pub fn online_score(&self) -> f64 {
        online_score(self.cum_gain, self.invocations)
    }

    pub fn is_fresh(&self) -> bool {
        self.invocations == 0
    }
}

pub fn online_score(cum_gain: f64, invocations: u64) -> f64 {
    cum_gain / invocations.max(1) as f64
}

/// Fixed three-section layout: name, activation condition, numbered steps,
/// termination condition.
pub fn render_skill_text(skill: &Skill) -> String {
    let mut out = String::new();
    out.push_str("Name: ");
    out.push_str(&skill.name);
    out.push_str("\nActivation Condition: ");
    out.push_str(&skill.initiation);
    out.push_str("\nExecution Procedure:");
    for (i, step) in skill.policy_steps.iter().enumerate() {
        out.push_str(&format!("\n  Step {}: {}", i + 1, step));
    }
    out.push_str("\nTermination Condition: ");
    out.push_str(&skill.termination);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolFile {
    capacity: usize,
    batch_index: u64,
    step_baseline: f64,
    return_baseline: f64,
    skills: Vec<Skill>,
}

/// Ordered, capacity-bounded collection of skills plus maintenance state.
#[derive(Debug, Clone, PartialEq)]
pub struct SkillPool {
    skills: Vec<Skill>,
    capacity: usize,
    pub step_baseline: f64,
    pub return_baseline: f64,
    pub batch_index: u64,
    next_id: u64,
}

impl SkillPool {
    pub fn new(capacity: usize) -> Result<Self, SkillError> {
        if capacity == 0 {
            return Err(SkillError::InvalidPool("capacity must be at least 1".into()));
        }
        Ok(Self {
            skills: Vec::new(),
            capacity,
            step_baseline: 0.0,
            return_baseline: 0.0,
            batch_index: 0,
            next_id: 1,
        })
    }

    /// Builds a pool of root skills from drafts, assigning ids in order.
    pub fn from_drafts(
        capacity: usize,
        drafts: Vec<SkillDraft>,
        tokenizer: &dyn Tokenizer,
    ) -> Result<Self, SkillError> {
        let mut pool = Self::new(capacity)?;
        for draft in drafts {
            let skill = pool.mint(draft, None, tokenizer)?;
            pool.insert(skill)?;
        }
        Ok(pool)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn skills(&self) -> &[Skill] {
        &self.skills
    }

    pub fn skills_mut(&mut self) -> impl Iterator<Item = &mut Skill> {
        self.skills.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.skills.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skills.is_empty()
    }

    pub fn ids(&self) -> Vec<SkillId> {
        self.skills.iter().map(|s| s.id).collect()
    }

    pub fn get(&self, id: SkillId) -> Option<&Skill> {
        self.skills.iter().find(|s| s.id == id)
    }

    pub fn get_mut(&mut self, id: SkillId) -> Option<&mut Skill> {
        self.skills.iter_mut().find(|s| s.id == id)
    }

    pub fn contains_name_version(&self, name: &str, version: u32) -> bool {
        self.skills.iter().any(|s| s.name == name && s.version == version)
    }

    /// Reserves the next id. Ids are never reused within a pool's lifetime.
    pub fn allocate_id(&mut self) -> SkillId {
        let id = SkillId(self.next_id);
        self.next_id += 1;
        id
    }

    /// Creates (but does not insert) a skill with a fresh id, stamped with the
    /// pool's current batch index.
    pub fn mint(
        &mut self,
        draft: SkillDraft,
        parent: Option<&Skill>,
        tokenizer: &dyn Tokenizer,
    ) -> Result<Skill, SkillError> {
        draft.validate()?;
        let id = self.allocate_id();
        Skill::new(id, draft, parent, self.batch_index, tokenizer)
    }

    /// Appends a skill. Rejects duplicate ids and duplicate (name, version).
    /// Capacity is enforced by maintenance, not here.
    pub fn insert(&mut self, skill: Skill) -> Result<(), SkillError> {
        if self.get(skill.id).is_some() {
            return Err(SkillError::InvalidPool(format!("duplicate skill id {}", skill.id)));
        }
        if self.contains_name_version(&skill.name, skill.version) {
            return Err(SkillError::InvalidPool(format!(
                "duplicate skill {} v{}",
                skill.name, skill.version
            )));
        }
        self.next_id = self.next_id.max(skill.id.0 + 1);
        self.skills.push(skill);
        Ok(())
    }

    pub fn remove(&mut self, id: SkillId) -> Option<Skill> {
        let pos = self.skills.iter().position(|s| s.id == id)?;
        Some(self.skills.remove(pos))
    }

    pub fn to_json(&self) -> String {
        let file = PoolFile {
            capacity: self.capacity,
            batch_index: self.batch_index,
            step_baseline: self.step_baseline,
            return_baseline: self.return_baseline,
            skills: self.skills.clone(),
        };
        let mut out = serde_json::to_string_pretty(&file).expect("pool serializes");
        out.push('\n');
        out
    }

    pub fn from_json(text: &str) -> Result<Self, SkillError> {
        let file: PoolFile = serde_json::from_str(text).map_err(|e| parse_error(text, &e))?;
        if file.capacity == 0 {
            return Err(SkillError::InvalidPool("capacity must be at least 1".into()));
        }
        if file.skills.len() > file.capacity {
            return Err(SkillError::InvalidPool(format!(
                "{} skills exceed capacity {}",
                file.skills.len(),
                file.capacity
            )));
        }
        let mut ids = HashSet::new();
        let mut names = HashSet::new();
        let mut next_id = 1;
        for skill in &file.skills {
            skill.draft().validate()?;
            if skill.version == 0 {
                return Err(SkillError::InvalidPool(format!("skill {} has version 0", skill.id)));
            }
            if skill.parent_id.is_none() != (skill.version == 1) {
                return Err(SkillError::InvalidPool(format!(
                    "skill {}: roots must be version 1 and children must name a parent",
                    skill.id
                )));
            }
            if !ids.insert(skill.id) {
                return Err(SkillError::InvalidPool(format!("duplicate skill id {}", skill.id)));
            }
            if !names.insert((skill.name.clone(), skill.version)) {
                return Err(SkillError::InvalidPool(format!(
                    "duplicate skill {} v{}",
                    skill.name, skill.version
                )));
            }
            next_id = next_id.max(skill.id.0 + 1).max(skill.parent_id.map_or(0, |p| p.0 + 1));
        }
        Ok(Self {
            skills: file.skills,
            capacity: file.capacity,
            step_baseline: file.step_baseline,
            return_baseline: file.return_baseline,
            batch_index: file.batch_index,
            next_id,
        })
    }
}

fn parse_error(text: &str, err: &serde_json::Error) -> SkillError {
    let (line, column) = (err.line(), err.column());
    let offset = if line == 0 {
        0
    } else {
        text.split_inclusive('\n').take(line - 1).map(str::len).sum::<usize>() + column.saturating_sub(1)
    };
    SkillError::Parse {
        line,
        column,
        offset,
        message: err.to_string(),
    }
}
