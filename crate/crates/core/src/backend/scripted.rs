//! Deterministic stand-ins for every backend role, driven by substring rule
//! tables. Used by the offline test-suite and by the built-in fixtures.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{
    ActionPolicy, ActionSample, ActionScore, BackendError, DoctorRequest, Embedder, EvolveRequest, GradientAggregator,
    Guidance, PromptTemplates, SkillDoctor, SkillEvolver, TerminationJudge, TrajectorySummarizer,
};
use crate::env::mastermind::{
    format_code, mastermind_consistent_codes, mastermind_feedback, parse_guess, parse_transcript, Code, PegFeedback,
    TranscriptInfo, DEFAULT_ENUMERATION_CAP,
};
use crate::env::EnvState;
use crate::gradient::{AggregatedGradient, CandidateReply, GradientComponents, GradientReply, SemanticGradient};
use crate::skill::Skill;

/// ln 1e-6, the log-probability of any action a scripted policy never emits.
pub const FLOOR_LOGPROB: f64 = -13.815_510_557_964_274;

fn matches(pattern: &Option<String>, text: &str) -> bool {
    pattern.as_deref().is_none_or(|p| text.contains(p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredAction {
    pub action: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyRule {
    /// Substring of the state text.
    #[serde(default)]
    pub when_state: Option<String>,
    /// Substring of the rendered skill.
    #[serde(default)]
    pub when_skill: Option<String>,
    pub action: String,
    #[serde(default)]
    pub logprob: f64,
    /// Other actions this rule assigns probability to (used when scoring).
    #[serde(default)]
    pub alternatives: Vec<ScoredAction>,
}

impl PolicyRule {
    pub fn new(when_state: Option<&str>, when_skill: Option<&str>, action: &str, logprob: f64) -> Self {
        Self {
            when_state: when_state.map(str::to_string),
            when_skill: when_skill.map(str::to_string),
            action: action.to_string(),
            logprob,
            alternatives: Vec::new(),
        }
    }

    pub fn or(mut self, action: &str, logprob: f64) -> Self {
        self.alternatives.push(ScoredAction {
            action: action.to_string(),
            logprob,
        });
        self
    }
}

/// First matching rule wins, both for sampling and for scoring.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    name: String,
    rules: Vec<PolicyRule>,
    floor: f64,
    templates: PromptTemplates,
}

impl ScriptedPolicy {
    pub fn new(name: impl Into<String>, rules: Vec<PolicyRule>) -> Self {
        Self {
            name: name.into(),
            rules,
            floor: FLOOR_LOGPROB,
            templates: PromptTemplates::default(),
        }
    }

    pub fn with_floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }

    pub fn with_templates(mut self, templates: PromptTemplates) -> Self {
        self.templates = templates;
        self
    }

    fn rule(&self, state: &EnvState, skill: &Skill) -> Option<&PolicyRule> {
        let rendered = skill.render();
        self.rules
            .iter()
            .find(|r| matches(&r.when_state, &state.text) && matches(&r.when_skill, &rendered))
    }
}

impl ActionPolicy for ScriptedPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn sample_action(&self, state: &EnvState, skill: &Skill) -> Result<ActionSample, BackendError> {
        let prompt = self.templates.decision_prompt(state, skill);
        let rule = self
            .rule(state, skill)
            .ok_or_else(|| BackendError::protocol("no scripted rule matches", state.text.clone()))?;
        Ok(ActionSample {
            action: rule.action.clone(),
            logprob: rule.logprob,
            raw: format!("<action>{}</action>", rule.action),
            prompt,
        })
    }

    fn action_logprob(&self, state: &EnvState, skill: &Skill, action: &str) -> Result<ActionScore, BackendError> {
        let logprob = self
            .rule(state, skill)
            .and_then(|r| {
                if r.action == action {
                    Some(r.logprob)
                } else {
                    r.alternatives.iter().find(|a| a.action == action).map(|a| a.logprob)
                }
            })
            .unwrap_or(self.floor);
        Ok(ActionScore {
            logprob,
            approximate: false,
        })
    }
}

/// Mastermind player. Under a skill whose text mentions `cue` it plays the
/// first code consistent with all feedback (uniform over the consistent set);
/// otherwise it plays the lexicographically first untried code with
/// probability 1/2.
#[derive(Debug, Clone)]
pub struct MastermindPolicy {
    name: String,
    cue: String,
    templates: PromptTemplates,
    floor: f64,
    consistent: Arc<Mutex<HashMap<HistoryKey, Arc<Vec<Code>>>>>,
}

type HistoryKey = (usize, u8, u8, bool, Vec<(Code, PegFeedback)>);

const CONSISTENT_CACHE_LIMIT: usize = 50_000;

enum MastermindPlan {
    Consistent(Vec<Code>),
    Sweep { first: Code, others: usize },
}

impl MastermindPolicy {
    pub fn new(name: impl Into<String>, cue: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            cue: cue.into().to_lowercase(),
            templates: PromptTemplates::default(),
            floor: FLOOR_LOGPROB,
            consistent: Arc::default(),
        }
    }

    pub fn with_templates(mut self, templates: PromptTemplates) -> Self {
        self.templates = templates;
        self
    }

    /// Codes consistent with the first `n` scored guesses, built by filtering
    /// the longest cached prefix.
    fn consistent_prefix(&self, info: &TranscriptInfo, n: usize) -> Result<Arc<Vec<Code>>, BackendError> {
        let c = &info.config;
        let key = |k: usize| {
            (
                c.code_length,
                c.digit_min,
                c.digit_max,
                c.allow_duplicates,
                info.history[..k].to_vec(),
            )
        };
        let cached = {
            let cache = self.consistent.lock().expect("cache lock");
            (0..=n).rev().find_map(|k| cache.get(&key(k)).map(|s| (k, s.clone())))
        };
        let (mut k, mut set) = match cached {
            Some(hit) => hit,
            None => {
                let all = mastermind_consistent_codes(&[], c, DEFAULT_ENUMERATION_CAP)
                    .map_err(|e| BackendError::Capability(e.to_string()))?;
                (0, Arc::new(all))
            }
        };
        let mut fresh = Vec::new();
        if k == 0 {
            fresh.push((key(0), set.clone()));
        }
        while k < n {
            let (guess, fb) = &info.history[k];
            let next: Vec<Code> = set
                .iter()
                .filter(|code| mastermind_feedback(code, guess).is_ok_and(|f| f == *fb))
                .cloned()
                .collect();
            k += 1;
            set = Arc::new(next);
            fresh.push((key(k), set.clone()));
        }
        let mut cache = self.consistent.lock().expect("cache lock");
        if cache.len() + fresh.len() > CONSISTENT_CACHE_LIMIT {
            cache.clear();
        }
        cache.extend(fresh);
        Ok(set)
    }

    fn plan(&self, state: &EnvState, skill: &Skill) -> Result<MastermindPlan, BackendError> {
        let info = parse_transcript(&state.text)
            .ok_or_else(|| BackendError::protocol("state is not a Mastermind transcript", state.text.clone()))?;
        let guessed: BTreeSet<&Code> = info.history.iter().map(|(g, _)| g).collect();
        if skill.render().to_lowercase().contains(&self.cue) {
            let codes = self.consistent_prefix(&info, info.history.len())?;
            let fresh: Vec<Code> = codes.iter().filter(|c| !guessed.contains(c)).cloned().collect();
            if !fresh.is_empty() {
                return Ok(MastermindPlan::Consistent(fresh));
            }
        }
        let all = self.consistent_prefix(&info, 0)?;
        let mut untried = all.iter().filter(|c| !guessed.contains(c));
        let first = untried
            .next()
            .cloned()
            .ok_or_else(|| BackendError::protocol("every code has been tried", state.text.clone()))?;
        Ok(MastermindPlan::Sweep {
            first,
            others: untried.count(),
        })
    }
}

impl ActionPolicy for MastermindPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn sample_action(&self, state: &EnvState, skill: &Skill) -> Result<ActionSample, BackendError> {
        let prompt = self.templates.decision_prompt(state, skill);
        let (code, logprob) = match self.plan(state, skill)? {
            MastermindPlan::Consistent(codes) => (codes[0].clone(), -(codes.len() as f64).ln()),
            MastermindPlan::Sweep { first, others } => (first, if others == 0 { 0.0 } else { 0.5f64.ln() }),
        };
        let action = format_code(&code);
        Ok(ActionSample {
            raw: format!("<action>{action}</action>"),
            action,
            logprob,
            prompt,
        })
    }

    fn action_logprob(&self, state: &EnvState, skill: &Skill, action: &str) -> Result<ActionScore, BackendError> {
        let Some(guess) = parse_guess(action) else {
            return Ok(ActionScore {
                logprob: self.floor,
                approximate: false,
            });
        };
        let logprob = match self.plan(state, skill)? {
            MastermindPlan::Consistent(codes) => {
                if codes.contains(&guess) {
                    -(codes.len() as f64).ln()
                } else {
                    self.floor
                }
            }
            MastermindPlan::Sweep { first, others } => {
                let info = parse_transcript(&state.text).expect("parsed by plan");
                let valid = guess.len() == info.config.code_length
                    && info.config.feedback(&guess, &guess).is_ok()
                    && (info.config.allow_duplicates || {
                        let distinct: BTreeSet<u8> = guess.iter().copied().collect();
                        distinct.len() == guess.len()
                    })
                    && !info.guessed(&guess);
                if guess == first {
                    if others == 0 {
                        0.0
                    } else {
                        0.5f64.ln()
                    }
                } else if valid && others > 0 {
                    (0.5 / others as f64).ln()
                } else {
                    self.floor
                }
            }
        };
        Ok(ActionScore {
            logprob,
            approximate: false,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeRule {
    #[serde(default)]
    pub when_state: Option<String>,
    #[serde(default)]
    pub when_skill: Option<String>,
    /// Raw reply, normally a status tag.
    pub reply: String,
}

#[derive(Debug, Clone)]
pub struct ScriptedJudge {
    rules: Vec<JudgeRule>,
    default_reply: String,
}

impl ScriptedJudge {
    pub fn new(rules: Vec<JudgeRule>) -> Self {
        Self {
            rules,
            default_reply: "<status>CONTINUE</status>".into(),
        }
    }

    pub fn with_default(mut self, reply: impl Into<String>) -> Self {
        self.default_reply = reply.into();
        self
    }

    /// Judge that answers `reply` when the state contains `phrase`.
    pub fn on_phrase(phrase: &str, reply: &str) -> Self {
        Self::new(vec![JudgeRule {
            when_state: Some(phrase.into()),
            when_skill: None,
            reply: reply.into(),
        }])
    }
}

impl TerminationJudge for ScriptedJudge {
    fn judge_raw(&self, state: &EnvState, skill: &Skill) -> Result<String, BackendError> {
        let rendered = skill.render();
        Ok(self
            .rules
            .iter()
            .find(|r| matches(&r.when_state, &state.text) && matches(&r.when_skill, &rendered))
            .map_or_else(|| self.default_reply.clone(), |r| r.reply.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoctorRule {
    /// Substring of the skill's trajectory segment.
    #[serde(default)]
    pub when_transcript: Option<String>,
    /// Fires only when the rendered skill does not contain this text.
    #[serde(default)]
    pub when_skill_lacks: Option<String>,
    /// Fires only when the episode return is below this value.
    #[serde(default)]
    pub max_reward: Option<f64>,
    pub diagnosis: String,
    #[serde(default = "yes")]
    pub is_related: bool,
    #[serde(default)]
    pub initiation: String,
    #[serde(default)]
    pub policy: String,
    #[serde(default)]
    pub termination: String,
}

fn yes() -> bool {
    true
}

impl DoctorRule {
    fn applies(&self, request: &DoctorRequest<'_>) -> bool {
        matches(&self.when_transcript, request.transcript)
            && self
                .when_skill_lacks
                .as_deref()
                .is_none_or(|t| !request.skill.render().contains(t))
            && self.max_reward.is_none_or(|m| request.reward < m)
    }

    fn reply(&self) -> GradientReply {
        GradientReply {
            diagnosis: self.diagnosis.clone(),
            is_related: self.is_related,
            semantic_gradient: GradientComponents {
                initiation: self.initiation.clone(),
                policy: self.policy.clone(),
                termination: self.termination.clone(),
            },
        }
    }
}

/// Replies with the first matching rule's gradient, or a related gradient
/// with no update when none matches.
#[derive(Debug, Clone)]
pub struct ScriptedDoctor {
    rules: Vec<DoctorRule>,
}

impl ScriptedDoctor {
    pub fn new(rules: Vec<DoctorRule>) -> Self {
        Self { rules }
    }
}

impl SkillDoctor for ScriptedDoctor {
    fn diagnose(&self, request: &DoctorRequest<'_>) -> Result<String, BackendError> {
        let reply = self
            .rules
            .iter()
            .find(|r| r.applies(request))
            .map(DoctorRule::reply)
            .unwrap_or_else(|| GradientReply {
                diagnosis: "The skill behaved as intended; no change is indicated.".into(),
                is_related: true,
                semantic_gradient: GradientComponents {
                    initiation: String::new(),
                    policy: String::new(),
                    termination: String::new(),
                },
            });
        Ok(serde_json::to_string(&reply).expect("reply serializes"))
    }
}

/// Exact-duplicate collapse followed by a per-component keyword vote.
///
/// Each related gradient's component text is labelled with the first keyword
/// (from `keywords`, case-insensitive) it contains. The label carried by the
/// most episodes wins (ties go to the earlier keyword); texts with another
/// label are dropped and their episodes reported. Unlabelled texts are kept.
#[derive(Debug, Clone, Default)]
pub struct KeywordMajorityAggregator {
    keywords: Vec<String>,
}

impl KeywordMajorityAggregator {
    pub fn new(keywords: Vec<String>) -> Self {
        Self {
            keywords: keywords.into_iter().map(|k| k.to_lowercase()).collect(),
        }
    }

    fn label(&self, text: &str) -> Option<usize> {
        let lower = text.to_lowercase();
        self.keywords.iter().position(|k| lower.contains(k.as_str()))
    }

    fn component(
        &self,
        entries: &[(u64, &str)],
        contributing: &mut BTreeSet<u64>,
        dropped: &mut BTreeSet<u64>,
    ) -> String {
        // text -> episodes that produced it
        let mut unique: BTreeMap<&str, BTreeSet<u64>> = BTreeMap::new();
        for &(ep, text) in entries {
            let text = text.trim();
            if !text.is_empty() {
                unique.entry(text).or_default().insert(ep);
            }
        }
        let mut votes: BTreeMap<usize, BTreeSet<u64>> = BTreeMap::new();
        for (text, eps) in &unique {
            if let Some(l) = self.label(text) {
                votes.entry(l).or_default().extend(eps.iter().copied());
            }
        }
        let winner = votes
            .iter()
            .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(a.0)))
            .map(|(l, _)| *l);
        let mut kept = Vec::new();
        for (text, eps) in unique {
            let label = self.label(text);
            if label.is_none() || label == winner {
                kept.push(text);
                contributing.extend(eps);
            } else {
                dropped.extend(eps);
            }
        }
        kept.join("\n")
    }
}

impl GradientAggregator for KeywordMajorityAggregator {
    fn aggregate(&self, _skill: &Skill, gradients: &[SemanticGradient]) -> Result<AggregatedGradient, BackendError> {
        let related: Vec<&SemanticGradient> = gradients.iter().filter(|g| g.is_related).collect();
        let mut contributing = BTreeSet::new();
        let mut dropped = BTreeSet::new();
        let pick = |f: fn(&SemanticGradient) -> &str| -> Vec<(u64, &str)> {
            related.iter().map(|g| (g.source_episode, f(g))).collect()
        };
        let g_initiation = self.component(&pick(|g| &g.g_initiation), &mut contributing, &mut dropped);
        let g_policy = self.component(&pick(|g| &g.g_policy), &mut contributing, &mut dropped);
        let g_termination = self.component(&pick(|g| &g.g_termination), &mut contributing, &mut dropped);
        Ok(AggregatedGradient {
            g_initiation,
            g_policy,
            g_termination,
            contributing: contributing.into_iter().collect(),
            dropped: dropped.into_iter().collect(),
        })
    }
}

/// Applies a gradient literally: non-empty initiation and termination
/// directions are appended to the parent's text, a non-empty policy direction
/// becomes a new final step. Summaries leave the skill unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedEvolver;

impl ScriptedEvolver {
    pub fn transform(parent: &Skill, guidance: &Guidance) -> CandidateReply {
        let mut reply = CandidateReply::from_draft(&parent.draft());
        if let Guidance::Gradient(g) = guidance {
            let extend = |base: &str, add: &str| {
                let add = add.trim();
                if add.is_empty() {
                    base.to_string()
                } else {
                    format!("{base} {add}")
                }
            };
            reply.initiation = extend(&parent.initiation, &g.g_initiation);
            reply.termination = extend(&parent.termination, &g.g_termination);
            if !g.g_policy.trim().is_empty() {
                reply.policy.push(g.g_policy.trim().to_string());
            }
        }
        reply
    }
}

impl SkillEvolver for ScriptedEvolver {
    fn evolve(&self, request: &EvolveRequest<'_>) -> Result<String, BackendError> {
        let reply = Self::transform(request.parent, request.guidance);
        Ok(serde_json::to_string(&reply).expect("reply serializes"))
    }
}

/// Template fill: step count and final reward.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedSummarizer;

impl TrajectorySummarizer for ScriptedSummarizer {
    fn summarize(&self, transcript: &str, reward: f64) -> Result<String, BackendError> {
        let steps = transcript.matches("[t=").count();
        let summary = format!("The agent took {steps} action(s). The final reward was {reward}.");
        Ok(format!("```json\n{}\n```", serde_json::json!({ "summary": summary })))
    }
}

/// Feature hashing of lowercased tokens into `dim` buckets (FNV-1a).
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: 256 }
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl HashEmbedder {
    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a(token.as_bytes()) % self.dim as u64) as usize
    }
}

impl Embedder for HashEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let mut v = vec![0.0; self.dim];
        for token in crate::similarity::token_set(text) {
            v[self.bucket(&token)] += 1.0;
        }
        Ok(v)
    }
}
