//! Text environments.
//!
//! Every environment speaks the same small interface: `reset(seed)` returns
//! the first [`EnvState`], `step(action)` returns the next state together with
//! the reward, and `admissible()` optionally lists the legal actions. Invalid
//! actions never surface as errors; they come back as in-band feedback.

pub mod lineworld;
pub mod mastermind;

use serde::{Deserialize, Serialize};

pub use lineworld::{LineWorld, LineWorldConfig, LineWorldStart};
pub use mastermind::{
    mastermind_consistent_codes, mastermind_feedback, Difficulty, Mastermind, MastermindConfig, MastermindError,
    PegFeedback,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub admissible: Option<Vec<String>>,
    pub terminal: bool,
    pub step_index: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    pub terminal: bool,
}

pub trait Environment: Send {
    fn name(&self) -> &str;
    fn reset(&mut self, seed: u64) -> EnvState;
    fn step(&mut self, action: &str) -> StepOutcome;
    fn admissible(&self) -> Option<Vec<String>> {
        None
    }
}

/// Creates independent single-episode environment instances.
pub trait EnvFactory: Send + Sync {
    fn name(&self) -> &str;
    fn create(&self) -> Box<dyn Environment>;
}

impl<F> EnvFactory for (String, F)
where
    F: Fn() -> Box<dyn Environment> + Send + Sync,
{
    fn name(&self) -> &str {
        &self.0
    }

    fn create(&self) -> Box<dyn Environment> {
        (self.1)()
    }
}

/// Factory for the crate's built-in environments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvSpec {
    Lineworld(LineWorldConfig),
    Mastermind(MastermindConfig),
}

impl EnvSpec {
    pub fn build(&self) -> Box<dyn Environment> {
        match self {
            EnvSpec::Lineworld(c) => Box::new(LineWorld::new(c.clone())),
            EnvSpec::Mastermind(c) => Box::new(Mastermind::new(c.clone())),
        }
    }

    pub fn env_name(&self) -> String {
        match self {
            EnvSpec::Lineworld(_) => "LineWorld".to_string(),
            EnvSpec::Mastermind(c) => c.env_name(),
        }
    }
}

pub struct SpecFactory {
    spec: EnvSpec,
    name: String,
}

impl SpecFactory {
    pub fn new(spec: EnvSpec) -> Self {
        let name = spec.env_name();
        Self { spec, name }
    }
}

impl EnvFactory for SpecFactory {
    fn name(&self) -> &str {
        &self.name
    }

    fn create(&self) -> Box<dyn Environment> {
        self.spec.build()
    }
}

/// Seed for episode `index` of a batch seeded with `seed` (SplitMix64 finalizer).
pub fn episode_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn episode_seeds_differ_by_index() {
        let seeds: std::collections::HashSet<u64> = (0..64).map(|i| episode_seed(7, i)).collect();
        assert_eq!(seeds.len(), 64);
        assert_eq!(episode_seed(7, 3), episode_seed(7, 3));
    }
}
