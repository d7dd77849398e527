//! Built-in seed skills and scripted backend bundles.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::scripted::{
    DoctorRule, HashEmbedder, JudgeRule, KeywordMajorityAggregator, MastermindPolicy, PolicyRule, ScriptedDoctor,
    ScriptedEvolver, ScriptedJudge, ScriptedPolicy, ScriptedSummarizer,
};
use crate::backend::{ActionPolicy, Backends, PromptTemplates};
use crate::env::{EnvSpec, LineWorldConfig, LineWorldStart, MastermindConfig};
use crate::skill::SkillDraft;

/// Phrase that makes the LineWorld fixture policy walk right.
pub const LINEWORLD_CUE: &str = "go right";
/// Phrase that makes the Mastermind fixture policy play consistent codes.
pub const MASTERMIND_CUE: &str = "consistent";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureKind {
    Lineworld,
    Mastermind,
}

pub fn mastermind_seeds() -> Vec<SkillDraft> {
    vec![
        SkillDraft::new(
            "StrategicPlanning",
            "Turn 1 of the game: no guess has been scored yet.",
            vec![
                "Pick an opening guess made of distinct digits from the allowed range.".into(),
                "Note the code length and digit range stated in the rules.".into(),
            ],
            "A guess has been scored with black and white pegs.",
        ),
        SkillDraft::new(
            "FBInference",
            "Guesses have been scored and the peg feedback must be used to narrow down the code.",
            vec![
                "Read the black and white peg counts of every scored guess.".into(),
                "Rule out digits and positions the feedback contradicts.".into(),
                "Submit a guess that has not been tried before.".into(),
            ],
            "The code is cracked or the game is over.",
        ),
    ]
}

pub fn lineworld_seeds() -> Vec<SkillDraft> {
    vec![SkillDraft::new(
        "LineWalker",
        "When the episode starts and you need to move along the line.",
        vec!["Pick a direction and move one cell.".into()],
        "The goal cell is reached.",
    )]
}

pub fn seeds(kind: FixtureKind) -> Vec<SkillDraft> {
    match kind {
        FixtureKind::Lineworld => lineworld_seeds(),
        FixtureKind::Mastermind => mastermind_seeds(),
    }
}

/// Environment the fixture is tuned for.
pub fn env_spec(kind: FixtureKind) -> EnvSpec {
    match kind {
        FixtureKind::Lineworld => EnvSpec::Lineworld(LineWorldConfig {
            length: 4,
            start: LineWorldStart::Random,
        }),
        FixtureKind::Mastermind => EnvSpec::Mastermind(MastermindConfig::default()),
    }
}

pub fn lineworld_policy_rules() -> Vec<PolicyRule> {
    vec![
        PolicyRule::new(None, Some(LINEWORLD_CUE), "[right]", 0.9f64.ln()).or("[left]", 0.1f64.ln()),
        PolicyRule::new(Some("at position 2 on"), None, "[right]", 0.6f64.ln()).or("[left]", 0.4f64.ln()),
        PolicyRule::new(None, None, "[left]", 0.6f64.ln()).or("[right]", 0.4f64.ln()),
    ]
}

pub fn lineworld_doctor_rules() -> Vec<DoctorRule> {
    vec![DoctorRule {
        when_transcript: None,
        when_skill_lacks: Some(LINEWORLD_CUE.into()),
        max_reward: Some(1.0),
        diagnosis: "The agent drifted left and never reached the goal on the right.".into(),
        is_related: true,
        initiation: "You are at a position on the line and the goal is at a position to the right.".into(),
        policy: "Always go right toward the goal.".into(),
        termination: String::new(),
    }]
}

pub fn mastermind_doctor_rules() -> Vec<DoctorRule> {
    vec![
        DoctorRule {
            when_transcript: Some("You have already guessed".into()),
            when_skill_lacks: Some("history".into()),
            max_reward: Some(1.0),
            diagnosis: "A guess was resubmitted, which the game rejects.".into(),
            is_related: true,
            initiation: String::new(),
            policy: "Keep a history of submitted guesses and never resubmit one.".into(),
            termination: "Hand control back as soon as an invalid-move notice appears.".into(),
        },
        DoctorRule {
            when_transcript: None,
            when_skill_lacks: Some(MASTERMIND_CUE.into()),
            max_reward: Some(1.0),
            diagnosis: "Guesses ignored the peg feedback, so turns ran out.".into(),
            is_related: true,
            initiation: String::new(),
            policy: "Before each guess, list the codes consistent with all feedback so far and submit the first one."
                .into(),
            termination: String::new(),
        },
    ]
}

pub fn mastermind_judge_rules() -> Vec<JudgeRule> {
    vec![JudgeRule {
        when_state: Some("Feedback:".into()),
        when_skill: Some("Name: StrategicPlanning".into()),
        reply: "<status>DONE</status>".into(),
    }]
}

pub fn aggregator_keywords(kind: FixtureKind) -> Vec<String> {
    match kind {
        FixtureKind::Lineworld => vec!["right".into(), "left".into()],
        FixtureKind::Mastermind => vec![MASTERMIND_CUE.into(), "history".into(), "random".into()],
    }
}

pub fn policy(kind: FixtureKind, templates: PromptTemplates) -> Arc<dyn ActionPolicy> {
    match kind {
        FixtureKind::Lineworld => {
            Arc::new(ScriptedPolicy::new("scripted-lineworld", lineworld_policy_rules()).with_templates(templates))
        }
        FixtureKind::Mastermind => {
            Arc::new(MastermindPolicy::new("scripted-mastermind", MASTERMIND_CUE).with_templates(templates))
        }
    }
}

/// Scripted bundle for `kind` with the built-in rule tables.
pub fn scripted_backends(kind: FixtureKind) -> Backends {
    let (judge, doctor) = match kind {
        FixtureKind::Lineworld => (
            ScriptedJudge::new(vec![]),
            ScriptedDoctor::new(lineworld_doctor_rules()),
        ),
        FixtureKind::Mastermind => (
            ScriptedJudge::new(mastermind_judge_rules()),
            ScriptedDoctor::new(mastermind_doctor_rules()),
        ),
    };
    Backends {
        policy: policy(kind, PromptTemplates::default()),
        judge: Arc::new(judge),
        doctor: Arc::new(doctor),
        aggregator: Arc::new(KeywordMajorityAggregator::new(aggregator_keywords(kind))),
        evolver: Arc::new(ScriptedEvolver),
        summarizer: Arc::new(ScriptedSummarizer),
        embedder: Some(Arc::new(HashEmbedder::default())),
    }
}

/// Doctor reply for a Mastermind episode lost to a repeated guess: empty
/// initiation component, non-empty policy and termination components.
pub const SAMPLE_GRADIENT_REPLY: &str = include_str!("../assets/fixtures/gradient_reply.json");
