//! Mastermind: guess a hidden code from black/white peg feedback.
//!
//! The transcript format mirrors the text-arena style game: the full history
//! of guesses and feedback is part of every state, and invalid moves are
//! reported in-band without consuming a turn until the retry budget runs out.

use std::sync::LazyLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EnvState, Environment, StepOutcome};

pub type Code = Vec<u8>;

#[derive(Debug, Error, PartialEq)]
pub enum MastermindError {
    #[error("secret has {secret} digits but guess has {guess}")]
    LengthMismatch { secret: usize, guess: usize },
    #[error("digit {digit} outside {min}..={max}")]
    DigitOutOfRange { digit: u8, min: u8, max: u8 },
    #[error("code space of {size} codes exceeds enumeration cap {cap}")]
    CapacityExceeded { size: u128, cap: u128 },
    #[error("invalid mastermind config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PegFeedback {
    pub black: usize,
    pub white: usize,
}

/// Black = same digit in the same position; white = multiset intersection of
/// the two codes minus black.
pub fn mastermind_feedback(secret: &[u8], guess: &[u8]) -> Result<PegFeedback, MastermindError> {
    if secret.len() != guess.len() {
        return Err(MastermindError::LengthMismatch {
            secret: secret.len(),
            guess: guess.len(),
        });
    }
    let mut secret_counts = [0usize; 256];
    let mut guess_counts = [0usize; 256];
    let mut black = 0;
    for (&s, &g) in secret.iter().zip(guess) {
        if s == g {
            black += 1;
        }
        secret_counts[s as usize] += 1;
        guess_counts[g as usize] += 1;
    }
    let common: usize = secret_counts.iter().zip(&guess_counts).map(|(a, b)| *a.min(b)).sum();
    Ok(PegFeedback {
        black,
        white: common - black,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    V0,
    Hard,
    Extreme,
}

impl Difficulty {
    /// (code length, first digit, last digit).
    pub fn parameters(self) -> (usize, u8, u8) {
        match self {
            Difficulty::V0 => (4, 1, 6),
            Difficulty::Hard => (5, 1, 8),
            Difficulty::Extreme => (6, 1, 10),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetryExhausted {
    /// The episode ends with partial credit.
    Terminate,
    /// The turn is consumed and the retry counter resets.
    ConsumeTurn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMastermindConfig")]
pub struct MastermindConfig {
    pub difficulty_tag: Difficulty,
    pub code_length: usize,
    pub digit_min: u8,
    pub digit_max: u8,
    pub allow_duplicates: bool,
    pub max_turns: u32,
    pub success_reward: f64,
    /// Subtracted from the step reward of every invalid move.
    pub invalid_penalty: f64,
    pub retry_budget: u32,
    pub on_retry_exhausted: RetryExhausted,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMastermindConfig {
    #[serde(default = "default_difficulty", alias = "difficulty")]
    difficulty_tag: Difficulty,
    code_length: Option<usize>,
    digit_min: Option<u8>,
    digit_max: Option<u8>,
    allow_duplicates: Option<bool>,
    max_turns: Option<u32>,
    success_reward: Option<f64>,
    invalid_penalty: Option<f64>,
    retry_budget: Option<u32>,
    on_retry_exhausted: Option<RetryExhausted>,
}

fn default_difficulty() -> Difficulty {
    Difficulty::V0
}

impl TryFrom<RawMastermindConfig> for MastermindConfig {
    type Error = MastermindError;

    fn try_from(raw: RawMastermindConfig) -> Result<Self, Self::Error> {
        let mut c = MastermindConfig::tier(raw.difficulty_tag);
        c.code_length = raw.code_length.unwrap_or(c.code_length);
        c.digit_min = raw.digit_min.unwrap_or(c.digit_min);
        c.digit_max = raw.digit_max.unwrap_or(c.digit_max);
        c.allow_duplicates = raw.allow_duplicates.unwrap_or(c.allow_duplicates);
        c.max_turns = raw.max_turns.unwrap_or(c.max_turns);
        c.success_reward = raw.success_reward.unwrap_or(c.success_reward);
        c.invalid_penalty = raw.invalid_penalty.unwrap_or(c.invalid_penalty);
        c.retry_budget = raw.retry_budget.unwrap_or(c.retry_budget);
        c.on_retry_exhausted = raw.on_retry_exhausted.unwrap_or(c.on_retry_exhausted);
        c.validate()?;
        Ok(c)
    }
}

impl Default for MastermindConfig {
    fn default() -> Self {
        Self::tier(Difficulty::V0)
    }
}

impl MastermindConfig {
    pub fn tier(difficulty: Difficulty) -> Self {
        let (code_length, digit_min, digit_max) = difficulty.parameters();
        Self {
            difficulty_tag: difficulty,
            code_length,
            digit_min,
            digit_max,
            allow_duplicates: false,
            max_turns: 20,
            success_reward: 1.0,
            invalid_penalty: 0.0,
            retry_budget: 3,
            on_retry_exhausted: RetryExhausted::Terminate,
        }
    }

    pub fn validate(&self) -> Result<(), MastermindError> {
        if self.code_length == 0 {
            return Err(MastermindError::InvalidConfig("code_length must be positive".into()));
        }
        if self.digit_min > self.digit_max {
            return Err(MastermindError::InvalidConfig("digit_min exceeds digit_max".into()));
        }
        let alphabet = (self.digit_max - self.digit_min) as usize + 1;
        if !self.allow_duplicates && alphabet < self.code_length {
            return Err(MastermindError::InvalidConfig(format!(
                "{alphabet} digits cannot fill {} positions without duplicates",
                self.code_length
            )));
        }
        if self.max_turns == 0 {
            return Err(MastermindError::InvalidConfig("max_turns must be at least 1".into()));
        }
        if self.retry_budget == 0 {
            return Err(MastermindError::InvalidConfig("retry_budget must be at least 1".into()));
        }
        Ok(())
    }

    pub fn env_name(&self) -> String {
        match self.difficulty_tag {
            Difficulty::V0 => "Mastermind-v0".into(),
            Difficulty::Hard => "Mastermind-v0-hard".into(),
            Difficulty::Extreme => "Mastermind-v0-extreme".into(),
        }
    }

    fn check_range(&self, code: &[u8]) -> Result<(), MastermindError> {
        for &d in code {
            if d < self.digit_min || d > self.digit_max {
                return Err(MastermindError::DigitOutOfRange {
                    digit: d,
                    min: self.digit_min,
                    max: self.digit_max,
                });
            }
        }
        Ok(())
    }

    /// Feedback with range validation on both codes.
    pub fn feedback(&self, secret: &[u8], guess: &[u8]) -> Result<PegFeedback, MastermindError> {
        self.check_range(secret)?;
        self.check_range(guess)?;
        mastermind_feedback(secret, guess)
    }

    pub fn code_space_size(&self) -> u128 {
        let n = (self.digit_max - self.digit_min) as u128 + 1;
        let len = self.code_length as u32;
        if self.allow_duplicates {
            n.saturating_pow(len)
        } else {
            (0..len as u128).map(|i| n - i).product()
        }
    }

    pub fn random_code(&self, rng: &mut impl Rng) -> Code {
        let digits: Vec<u8> = (self.digit_min..=self.digit_max).collect();
        if self.allow_duplicates {
            (0..self.code_length)
                .map(|_| digits[rng.random_range(0..digits.len())])
                .collect()
        } else {
            let mut digits = digits;
            digits.shuffle(rng);
            digits.truncate(self.code_length);
            digits
        }
    }

    fn rules_line(&self) -> String {
        format!(
            "[GAME] Mastermind. Find the secret code: {} digits long, each digit from {} to {}, {}.",
            self.code_length,
            self.digit_min,
            self.digit_max,
            if self.allow_duplicates {
                "duplicates allowed"
            } else {
                "with no duplicates"
            }
        )
    }
}

/// Visits the code space in lexicographic order.
fn for_each_code(config: &MastermindConfig, mut visit: impl FnMut(&[u8])) {
    fn rec(config: &MastermindConfig, code: &mut Vec<u8>, visit: &mut dyn FnMut(&[u8])) {
        if code.len() == config.code_length {
            visit(code);
            return;
        }
        for d in config.digit_min..=config.digit_max {
            if !config.allow_duplicates && code.contains(&d) {
                continue;
            }
            code.push(d);
            rec(config, code, visit);
            code.pop();
        }
    }
    rec(config, &mut Vec::with_capacity(config.code_length), &mut visit);
}

pub const DEFAULT_ENUMERATION_CAP: u128 = 2_000_000;

/// Every code consistent with all `(guess, feedback)` pairs, in lexicographic
/// order.
pub fn mastermind_consistent_codes(
    history: &[(Code, PegFeedback)],
    config: &MastermindConfig,
    cap: u128,
) -> Result<Vec<Code>, MastermindError> {
    let size = config.code_space_size();
    if size > cap {
        return Err(MastermindError::CapacityExceeded { size, cap });
    }
    for (guess, _) in history {
        if guess.len() != config.code_length {
            return Err(MastermindError::LengthMismatch {
                secret: config.code_length,
                guess: guess.len(),
            });
        }
        config.check_range(guess)?;
    }
    let mut out = Vec::new();
    for_each_code(config, |code| {
        let ok = history
            .iter()
            .all(|(guess, fb)| mastermind_feedback(code, guess).map(|f| f == *fb).unwrap_or(false));
        if ok {
            out.push(code.to_vec());
        }
    });
    Ok(out)
}

pub fn format_code(code: &[u8]) -> String {
    let digits: Vec<String> = code.iter().map(u8::to_string).collect();
    format!("[{}]", digits.join(" "))
}

fn format_code_commas(code: &[u8]) -> String {
    let digits: Vec<String> = code.iter().map(u8::to_string).collect();
    format!("[{}]", digits.join(", "))
}

static BRACKETS: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\[([^\[\]]*)\]").unwrap());

/// Extracts digits from "[d1 d2 ...]" (or a bare digit list). `None` when no
/// digit tokens are present or a token is not a number.
pub fn parse_guess(action: &str) -> Option<Code> {
    let body = BRACKETS
        .captures(action)
        .and_then(|c| c.get(1))
        .map_or(action, |m| m.as_str());
    let tokens: Vec<&str> = body
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .collect();
    if tokens.is_empty() {
        return None;
    }
    tokens.iter().map(|t| t.parse::<u8>().ok()).collect()
}

/// Facts recoverable from a Mastermind transcript.
#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptInfo {
    pub config: MastermindConfig,
    pub history: Vec<(Code, PegFeedback)>,
}

impl TranscriptInfo {
    pub fn guessed(&self, code: &[u8]) -> bool {
        self.history.iter().any(|(g, _)| g == code)
    }
}

static RULES: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(\d+) digits long, each digit from (\d+) to (\d+), (with no duplicates|duplicates allowed)").unwrap()
});
static SUBMITTED: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"Submitted (\[[^\]]*\])\. Feedback: (\d+) black peg\(s\), (\d+) white peg\(s\)").unwrap()
});

/// Parses the rules line and every scored guess from a transcript.
pub fn parse_transcript(text: &str) -> Option<TranscriptInfo> {
    let caps = RULES.captures(text)?;
    let config = MastermindConfig {
        code_length: caps[1].parse().ok()?,
        digit_min: caps[2].parse().ok()?,
        digit_max: caps[3].parse().ok()?,
        allow_duplicates: &caps[4] == "duplicates allowed",
        ..Default::default()
    };
    let history = SUBMITTED
        .captures_iter(text)
        .filter_map(|c| {
            let code = parse_guess(&c[1])?;
            let fb = PegFeedback {
                black: c[2].parse().ok()?,
                white: c[3].parse().ok()?,
            };
            Some((code, fb))
        })
        .collect();
    Some(TranscriptInfo { config, history })
}

pub struct Mastermind {
    config: MastermindConfig,
    name: String,
    secret: Code,
    transcript: Vec<String>,
    guesses: Vec<Code>,
    turn: u32,
    invalid_in_turn: u32,
    best_black: usize,
    steps: u64,
    done: bool,
}

impl Mastermind {
    pub fn new(config: MastermindConfig) -> Self {
        config.validate().expect("valid mastermind config");
        let name = config.env_name();
        Self {
            config,
            name,
            secret: Vec::new(),
            transcript: Vec::new(),
            guesses: Vec::new(),
            turn: 0,
            invalid_in_turn: 0,
            best_black: 0,
            steps: 0,
            done: false,
        }
    }

    pub fn config(&self) -> &MastermindConfig {
        &self.config
    }

    pub fn secret(&self) -> &[u8] {
        &self.secret
    }

    /// Valid guesses submitted so far.
    pub fn turns_used(&self) -> u32 {
        self.turn
    }

    /// Replaces the secret (tests and replays).
    pub fn set_secret(&mut self, secret: Code) -> Result<(), MastermindError> {
        self.config.feedback(&secret, &secret)?;
        self.secret = secret;
        Ok(())
    }

    fn partial_reward(&self) -> f64 {
        self.best_black as f64 / self.config.code_length as f64
    }

    fn state(&self) -> EnvState {
        let mut text = self.transcript.join("\n");
        if !self.done {
            text.push_str(&format!("\nTurn {} of {}.", self.turn + 1, self.config.max_turns));
        }
        EnvState {
            text,
            admissible: None,
            terminal: self.done,
            step_index: self.steps,
        }
    }

    fn invalid_reason(&self, guess: &Option<Code>) -> Option<String> {
        let c = &self.config;
        let Some(guess) = guess else {
            return Some(format!(
                "Your guess must use the format '{}'.",
                format_code(&(c.digit_min..).take(c.code_length).collect::<Vec<u8>>())
            ));
        };
        if guess.len() != c.code_length {
            return Some(format!("Your guess must contain exactly {} digits.", c.code_length));
        }
        if guess.iter().any(|&d| d < c.digit_min || d > c.digit_max) {
            return Some(format!(
                "Each digit must be between {} and {}.",
                c.digit_min, c.digit_max
            ));
        }
        if !c.allow_duplicates {
            let mut sorted = guess.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != guess.len() {
                return Some("Digits must not repeat within a guess.".into());
            }
        }
        if self.guesses.contains(guess) {
            return Some(format!("You have already guessed {}.", format_code_commas(guess)));
        }
        None
    }

    fn finish(&mut self, line: String, reward: f64) -> StepOutcome {
        self.done = true;
        self.transcript.push(line);
        StepOutcome {
            state: self.state(),
            reward,
            terminal: true,
        }
    }
}

impl Environment for Mastermind {
    fn name(&self) -> &str {
        &self.name
    }

    fn reset(&mut self, seed: u64) -> EnvState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.secret = self.config.random_code(&mut rng);
        self.guesses.clear();
        self.turn = 0;
        self.invalid_in_turn = 0;
        self.best_black = 0;
        self.steps = 0;
        self.done = false;
        let example: Vec<u8> = (self.config.digit_min..=self.config.digit_max)
            .rev()
            .take(self.config.code_length)
            .collect();
        self.transcript = vec![
            self.config.rules_line(),
            format!("Submit a guess in the format '{}'.", format_code(&example)),
            "Feedback comes as black and white pegs: a black peg is a correct digit in the correct position, a white peg is a correct digit in the wrong position.".into(),
            format!("You have {} turns.", self.config.max_turns),
        ];
        self.state()
    }

    fn step(&mut self, action: &str) -> StepOutcome {
        if self.done {
            return StepOutcome {
                state: self.state(),
                reward: 0.0,
                terminal: true,
            };
        }
        self.steps += 1;
        let action = action.trim();
        self.transcript.push(format!("[Player] {action}"));
        let guess = parse_guess(action);
        if let Some(reason) = self.invalid_reason(&guess) {
            self.invalid_in_turn += 1;
            self.transcript.push(format!(
                "[GAME] You attempted an invalid move. Reason: {reason} Please try a different guess."
            ));
            if self.invalid_in_turn >= self.config.retry_budget {
                match self.config.on_retry_exhausted {
                    RetryExhausted::Terminate => {
                        let reward = self.partial_reward();
                        return self.finish(
                            format!("[GAME] Game over: too many invalid moves. Final reward: {reward}."),
                            reward - self.config.invalid_penalty,
                        );
                    }
                    RetryExhausted::ConsumeTurn => {
                        self.invalid_in_turn = 0;
                        self.turn += 1;
                        if self.turn >= self.config.max_turns {
                            let reward = self.partial_reward();
                            return self.finish(
                                format!("[GAME] Game over: out of turns. Final reward: {reward}."),
                                reward - self.config.invalid_penalty,
                            );
                        }
                    }
                }
            }
            return StepOutcome {
                state: self.state(),
                reward: -self.config.invalid_penalty,
                terminal: false,
            };
        }
        let guess = guess.expect("validated guess");
        let fb = mastermind_feedback(&self.secret, &guess).expect("validated lengths");
        self.transcript.push(format!(
            "[GAME] Submitted {}. Feedback: {} black peg(s), {} white peg(s).",
            format_code(&guess),
            fb.black,
            fb.white
        ));
        self.guesses.push(guess);
        self.best_black = self.best_black.max(fb.black);
        self.turn += 1;
        self.invalid_in_turn = 0;
        if fb.black == self.config.code_length {
            let reward = self.config.success_reward;
            return self.finish(format!("[GAME] You cracked the code! Final reward: {reward}."), reward);
        }
        if self.turn >= self.config.max_turns {
            let reward = self.partial_reward();
            return self.finish(
                format!("[GAME] Game over: out of turns. Final reward: {reward}."),
                reward,
            );
        }
        StepOutcome {
            state: self.state(),
            reward: 0.0,
            terminal: false,
        }
    }
}
