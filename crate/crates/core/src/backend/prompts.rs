//! Prompt templates and their rendering.
//!
//! Templates use `{name}` placeholders. Substitution is single-pass, so text
//! coming from the environment can never inject a placeholder.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::EnvState;
use crate::skill::Skill;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub decision: String,
    pub termination: String,
    pub doctor: String,
    pub evolver: String,
    pub evolver_no_sg: String,
    pub summarizer: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            decision: include_str!("../../assets/prompts/decision.txt").to_string(),
            termination: include_str!("../../assets/prompts/termination.txt").to_string(),
            doctor: include_str!("../../assets/prompts/doctor.txt").to_string(),
            evolver: include_str!("../../assets/prompts/evolver.txt").to_string(),
            evolver_no_sg: include_str!("../../assets/prompts/evolver_no_sg.txt").to_string(),
            summarizer: include_str!("../../assets/prompts/summarizer.txt").to_string(),
        }
    }
}

/// Paths to replacement template files; unset entries keep the built-in text.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptOverrides {
    pub decision: Option<String>,
    pub termination: Option<String>,
    pub doctor: Option<String>,
    pub evolver: Option<String>,
    pub evolver_no_sg: Option<String>,
    pub summarizer: Option<String>,
}

impl PromptTemplates {
    /// Applies file overrides, resolving relative paths against `base`.
    pub fn with_overrides(mut self, overrides: &PromptOverrides, base: &Path) -> std::io::Result<Self> {
        let slots: [(&Option<String>, &mut String); 6] = [
            (&overrides.decision, &mut self.decision),
            (&overrides.termination, &mut self.termination),
            (&overrides.doctor, &mut self.doctor),
            (&overrides.evolver, &mut self.evolver),
            (&overrides.evolver_no_sg, &mut self.evolver_no_sg),
            (&overrides.summarizer, &mut self.summarizer),
        ];
        for (path, slot) in slots {
            if let Some(path) = path {
                *slot = std::fs::read_to_string(base.join(path))?;
            }
        }
        Ok(self)
    }

    pub fn decision_prompt(&self, state: &EnvState, skill: &Skill) -> String {
        let admissible = match &state.admissible {
            Some(cmds) if !cmds.is_empty() => cmds.join(", "),
            _ => "(none listed)".to_string(),
        };
        fill(
            &self.decision,
            &[
                ("state", &state.text),
                ("admissible_commands", &admissible),
                ("skill_text", &skill.render()),
            ],
        )
    }

    pub fn termination_prompt(&self, state: &EnvState, skill: &Skill) -> String {
        fill(
            &self.termination,
            &[
                ("state", &state.text),
                ("skill_name", &skill.name),
                ("skill_initiation", &skill.initiation),
                ("skill_termination", &skill.termination),
            ],
        )
    }

    pub fn doctor_prompt(&self, skill: &Skill, transcript: &str, reward: f64) -> String {
        fill(
            &self.doctor,
            &[
                ("skill_info", &skill.render()),
                ("trajectory", transcript),
                ("reward", &reward.to_string()),
            ],
        )
    }

    pub fn evolver_prompt(
        &self,
        parent: &Skill,
        gradients: &str,
        candidate_index: usize,
        n_candidates: usize,
    ) -> String {
        fill(
            &self.evolver,
            &[
                ("old_skill_definition", &parent.render()),
                ("gradients", gradients),
                ("candidate_index", &candidate_index.to_string()),
                ("n_candidates", &n_candidates.to_string()),
            ],
        )
    }

    pub fn evolver_no_sg_prompt(&self, parent: &Skill, summaries: &[String]) -> String {
        let listed: Vec<String> = summaries
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{}. {}", i + 1, s))
            .collect();
        fill(
            &self.evolver_no_sg,
            &[
                ("old_skill_definition", &parent.render()),
                ("summaries", &listed.join("\n")),
            ],
        )
    }

    pub fn summarizer_prompt(&self, transcript: &str, reward: f64) -> String {
        fill(
            &self.summarizer,
            &[("trajectory", transcript), ("reward", &reward.to_string())],
        )
    }
}

/// Replaces `{key}` occurrences in one left-to-right pass. Unknown
/// placeholders and stray braces are copied through.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let key = &after[..close];
            vars.iter().find(|(k, _)| *k == key).map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}
