//! One-dimensional corridor: walk right to reach the goal cell.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EnvState, Environment, StepOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineWorldStart {
    Fixed(u32),
    /// Uniform over every non-goal cell, drawn from the reset seed.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineWorldConfig {
    #[serde(default = "default_length")]
    pub length: u32,
    #[serde(default = "default_start")]
    pub start: LineWorldStart,
}

fn default_length() -> u32 {
    4
}

fn default_start() -> LineWorldStart {
    LineWorldStart::Fixed(0)
}

impl Default for LineWorldConfig {
    fn default() -> Self {
        Self {
            length: default_length(),
            start: default_start(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Move {
    Left,
    Right,
}

fn parse_move(action: &str) -> Option<Move> {
    let tokens = crate::similarity::token_set(action);
    match (tokens.contains("left"), tokens.contains("right")) {
        (true, false) => Some(Move::Left),
        (false, true) => Some(Move::Right),
        _ => None,
    }
}

pub struct LineWorld {
    config: LineWorldConfig,
    position: u32,
    steps: u64,
    done: bool,
}

impl LineWorld {
    pub fn new(config: LineWorldConfig) -> Self {
        assert!(config.length >= 2, "LineWorld needs at least two cells");
        Self {
            config,
            position: 0,
            steps: 0,
            done: false,
        }
    }

    pub fn position(&self) -> u32 {
        self.position
    }

    fn goal(&self) -> u32 {
        self.config.length - 1
    }

    fn describe(&self, note: Option<&str>) -> EnvState {
        let mut text = format!(
            "LineWorld: you are at position {} on a line of {} cells. The goal is at position {}. Valid moves: [left] or [right].",
            self.position,
            self.config.length,
            self.goal()
        );
        if let Some(note) = note {
            text.push(' ');
            text.push_str(note);
        }
        EnvState {
            text,
            admissible: if self.done { None } else { self.admissible() },
            terminal: self.done,
            step_index: self.steps,
        }
    }
}

impl Environment for LineWorld {
    fn name(&self) -> &str {
        "LineWorld"
    }

    fn reset(&mut self, seed: u64) -> EnvState {
        self.steps = 0;
        self.done = false;
        self.position = match self.config.start {
            LineWorldStart::Fixed(p) => p.min(self.goal() - 1),
            LineWorldStart::Random => ChaCha8Rng::seed_from_u64(seed).random_range(0..self.goal()),
        };
        self.describe(None)
    }

    fn step(&mut self, action: &str) -> StepOutcome {
        if self.done {
            return StepOutcome {
                state: self.describe(Some("The episode is over.")),
                reward: 0.0,
                terminal: true,
            };
        }
        self.steps += 1;
        let note = match parse_move(action) {
            Some(Move::Left) => {
                self.position = self.position.saturating_sub(1);
                None
            }
            Some(Move::Right) => {
                self.position = (self.position + 1).min(self.goal());
                None
            }
            None => Some(format!(
                "Invalid move: '{}' is neither [left] nor [right].",
                action.trim()
            )),
        };
        let reward = if self.position == self.goal() {
            self.done = true;
            1.0
        } else {
            0.0
        };
        let note = if self.done {
            Some("You reached the goal.".to_string())
        } else {
            note
        };
        StepOutcome {
            state: self.describe(note.as_deref()),
            reward,
            terminal: self.done,
        }
    }

    fn admissible(&self) -> Option<Vec<String>> {
        Some(vec!["[left]".to_string(), "[right]".to_string()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> LineWorld {
        LineWorld::new(LineWorldConfig::default())
    }

    #[test]
    fn right_from_two_reaches_goal() {
        let mut w = world();
        w.reset(0);
        w.step("right");
        w.step("right");
        assert_eq!(w.position(), 2);
        let out = w.step("right");
        assert_eq!(w.position(), 3);
        assert_eq!(out.reward, 1.0);
        assert!(out.terminal);
        assert!(out.state.terminal);
    }

    #[test]
    fn left_at_zero_clamps() {
        let mut w = world();
        w.reset(0);
        let out = w.step("[left]");
        assert_eq!(w.position(), 0);
        assert_eq!(out.reward, 0.0);
        assert!(!out.terminal);
    }

    #[test]
    fn gibberish_is_in_band_feedback() {
        let mut w = world();
        w.reset(0);
        let out = w.step("jump around");
        assert_eq!(w.position(), 0);
        assert_eq!(out.reward, 0.0);
        assert!(out.state.text.contains("Invalid move"));
        assert_eq!(out.state.step_index, 1);
    }

    #[test]
    fn random_start_is_seeded_and_never_the_goal() {
        let cfg = LineWorldConfig {
            length: 4,
            start: LineWorldStart::Random,
        };
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..64 {
            let mut a = LineWorld::new(cfg.clone());
            let mut b = LineWorld::new(cfg.clone());
            assert_eq!(a.reset(seed), b.reset(seed));
            assert!(a.position() < 3);
            seen.insert(a.position());
        }
        assert_eq!(seen.len(), 3);
    }
}
