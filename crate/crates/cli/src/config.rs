//! Run configuration: one JSON document, optionally patched by dotted-path
//! overrides such as `pool.batch_size=4`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use skillmdp::backend::remote::RemoteConfig;
use skillmdp::backend::PromptOverrides;
use skillmdp::env::{EnvSpec, MastermindConfig};
use skillmdp::fixtures::FixtureKind;
use skillmdp::{Ablation, EvolveParams, GateParams, RewardMode};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default = "default_env")]
    pub env: EnvSpec,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub gate: GateParams,
    #[serde(default)]
    pub pool: PoolConfig,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub seed: u64,
    /// JSON array of skill drafts; the built-in seeds for the environment
    /// are used when absent.
    #[serde(default)]
    pub seeds_file: Option<PathBuf>,
    #[serde(default = "one")]
    pub parallelism: usize,
    #[serde(default = "default_run_dir")]
    pub run_dir: PathBuf,
    #[serde(default)]
    pub tokenizer: TokenizerKind,
    #[serde(default)]
    pub similarity: SimilarityKind,
    #[serde(default)]
    pub selector: SelectorConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_env() -> EnvSpec {
    EnvSpec::Mastermind(MastermindConfig::default())
}

fn one() -> usize {
    1
}

fn default_run_dir() -> PathBuf {
    PathBuf::from("runs/latest")
}

impl Default for Config {
    fn default() -> Self {
        serde_json::from_value(Value::Object(Default::default())).expect("empty config deserializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
#[allow(clippy::large_enum_variant)]
pub enum BackendConfig {
    Scripted {
        /// Rule tables to use; defaults to the ones matching the environment.
        #[serde(default)]
        fixture: Option<FixtureKind>,
        /// Agent name recorded in trajectories.
        #[serde(default)]
        name: Option<String>,
    },
    Remote {
        #[serde(default)]
        client: RemoteConfig,
        #[serde(default)]
        prompts: PromptOverrides,
    },
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Scripted {
            fixture: None,
            name: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    pub capacity: usize,
    pub n_candidates: usize,
    pub batch_size: usize,
    pub iterations: u64,
    pub redundancy_threshold: f64,
    pub max_steps: usize,
    pub reward_mode: RewardMode,
    pub parse_retries: u32,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            capacity: 16,
            n_candidates: 3,
            batch_size: 8,
            iterations: 20,
            redundancy_threshold: 0.9,
            max_steps: 20,
            reward_mode: RewardMode::PerStep,
            parse_retries: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    #[default]
    Whitespace,
    BytePairEstimate,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    #[default]
    Jaccard,
    Embedding,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SelectorConfig {
    #[default]
    Similarity,
    /// Highest online score among the `k` most similar skills.
    Value { k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Defaults to the run seed.
    pub seed: Option<u64>,
    /// An episode counts as a success when its return reaches this value.
    pub success_threshold: f64,
    /// Task the pool was learned on, for cross-task reuse.
    pub learned_task: Option<String>,
    /// Agent that learned the pool, for cross-agent reuse.
    pub learned_agent: Option<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 50,
            seed: None,
            success_threshold: 1.0,
            learned_task: None,
            learned_agent: None,
        }
    }
}

impl Config {
    /// Fixture rule tables for a scripted backend.
    pub fn fixture(&self) -> Option<FixtureKind> {
        match &self.backend {
            BackendConfig::Scripted { fixture, .. } => Some(fixture.unwrap_or(match self.env {
                EnvSpec::Lineworld(_) => FixtureKind::Lineworld,
                EnvSpec::Mastermind(_) => FixtureKind::Mastermind,
            })),
            BackendConfig::Remote { .. } => None,
        }
    }

    pub fn evolve_params(&self) -> EvolveParams {
        EvolveParams {
            n_candidates: self.pool.n_candidates,
            redundancy_threshold: self.pool.redundancy_threshold,
            reward_mode: self.pool.reward_mode,
            gate: self.gate,
            ablation: self.ablation,
            parse_retries: self.pool.parse_retries,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, msg: &str| Err(CliError::Validation(format!("{field}: {msg}")));
        let p = &self.pool;
        if p.capacity == 0 {
            return bad("pool.capacity", "must be at least 1");
        }
        if p.n_candidates == 0 {
            return bad("pool.n_candidates", "must be at least 1");
        }
        if p.batch_size == 0 {
            return bad("pool.batch_size", "must be at least 1");
        }
        if p.max_steps == 0 {
            return bad("pool.max_steps", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&p.redundancy_threshold) {
            return bad("pool.redundancy_threshold", "must lie in [0, 1]");
        }
        if self.parallelism == 0 {
            return bad("parallelism", "must be at least 1");
        }
        if self.eval.episodes == 0 {
            return bad("eval.episodes", "must be at least 1");
        }
        if let SelectorConfig::Value { k: 0 } = self.selector {
            return bad("selector.k", "must be at least 1");
        }
        self.gate
            .validate()
            .map_err(|e| CliError::Validation(format!("gate: {e}")))?;
        match &self.env {
            EnvSpec::Lineworld(c) if c.length < 2 => return bad("env.length", "must be at least 2"),
            EnvSpec::Mastermind(c) => c.validate().map_err(|e| CliError::Validation(format!("env: {e}")))?,
            _ => {}
        }
        match &self.backend {
            BackendConfig::Scripted { .. } => {
                let fixture = self.fixture().expect("scripted backend has a fixture");
                let matches = matches!(
                    (fixture, &self.env),
                    (FixtureKind::Lineworld, EnvSpec::Lineworld(_)) | (FixtureKind::Mastermind, EnvSpec::Mastermind(_))
                );
                if !matches {
                    return bad(
                        "backend.fixture",
                        &format!("{fixture:?} rules do not fit environment {}", self.env.env_name()),
                    );
                }
            }
            BackendConfig::Remote { client, .. } => client
                .validate()
                .map_err(|e| CliError::Validation(format!("backend.client: {e}")))?,
        }
        Ok(())
    }
}

/// Splits `--a.b=v`, `--a.b v` and `a.b=v` arguments into `(path, value)`.
pub fn parse_override_args(args: &[String]) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let body = arg.strip_prefix("--").unwrap_or(arg);
        if let Some((k, v)) = body.split_once('=') {
            out.push((k.to_string(), v.to_string()));
        } else if arg.starts_with("--") {
            let v = it
                .next()
                .ok_or_else(|| CliError::Validation(format!("flag --{body} needs a value")))?;
            out.push((body.to_string(), v.clone()));
        } else {
            return Err(CliError::Validation(format!(
                "unexpected argument {arg:?}; overrides look like --pool.batch_size=8"
            )));
        }
    }
    Ok(out)
}

/// Sets `path` (dot separated) in `doc`, creating objects along the way.
/// The value is read as JSON when it parses, else as a string.
pub fn apply_override(doc: &mut Value, path: &str, raw: &str) -> Result<(), CliError> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Validation(format!("malformed override path {path:?}")));
    }
    for (i, key) in keys.iter().enumerate() {
        let obj = match cur {
            Value::Object(m) => m,
            other => {
                if other.is_null() {
                    *other = Value::Object(Default::default());
                    other.as_object_mut().expect("just set")
                } else {
                    return Err(CliError::Validation(format!(
                        "override {path}: {} is not an object",
                        keys[..i].join(".")
                    )));
                }
            }
        };
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(key.to_string()).or_insert(Value::Null);
    }
    unreachable!("path has at least one key")
}

/// Parses a config document, reporting the failing field path.
pub fn config_from_value(doc: Value) -> Result<Config, CliError> {
    let config: Config = serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        CliError::Validation(format!("at `{path}`: {}", e.into_inner()))
    })?;
    config.validate()?;
    Ok(config)
}

/// Loads `path` (or an empty document), applies overrides, and resolves
/// relative file references against the config file's directory.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Config, CliError> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Validation(format!("config {} is not JSON: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    for (k, v) in overrides {
        apply_override(&mut doc, k, v)?;
    }
    let mut config = config_from_value(doc)?;
    if let Some(base) = path.and_then(Path::parent) {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(s) = config.seeds_file.as_mut() {
            resolve(s);
        }
        if let BackendConfig::Remote { prompts, .. } = &mut config.backend {
            for p in [
                &mut prompts.decision,
                &mut prompts.termination,
                &mut prompts.doctor,
                &mut prompts.evolver,
                &mut prompts.evolver_no_sg,
                &mut prompts.summarizer,
            ]
            .into_iter()
            .flatten()
            {
                if Path::new(p.as_str()).is_relative() {
                    *p = base.join(&*p).to_string_lossy().into_owned();
                }
            }
        }
    }
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = Config::default();
        c.validate().unwrap();
        assert_eq!(c.pool.batch_size, 8);
        assert_eq!(c.pool.iterations, 20);
        assert_eq!(c.pool.capacity, 16);
    }

    #[test]
    fn unknown_field_names_its_path() {
        let err = config_from_value(serde_json::json!({"pool": {"batch": 3}})).unwrap_err();
        assert!(err.to_string().contains("pool"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn overrides_patch_nested_fields() {
        let mut doc = serde_json::json!({"pool": {"batch_size": 8}});
        apply_override(&mut doc, "pool.batch_size", "2").unwrap();
        apply_override(&mut doc, "ablation.no_gate", "true").unwrap();
        apply_override(&mut doc, "run_dir", "out/x").unwrap();
        let c = config_from_value(doc).unwrap();
        assert_eq!(c.pool.batch_size, 2);
        assert!(c.ablation.no_gate);
        assert_eq!(c.run_dir, PathBuf::from("out/x"));
    }

    #[test]
    fn override_args_forms() {
        let args: Vec<String> = ["--seed=3", "--pool.iterations", "0", "gate.epsilon=0.3"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let parsed = parse_override_args(&args).unwrap();
        assert_eq!(parsed[0], ("seed".into(), "3".into()));
        assert_eq!(parsed[1], ("pool.iterations".into(), "0".into()));
        assert_eq!(parsed[2], ("gate.epsilon".into(), "0.3".into()));
        assert!(parse_override_args(&["--seed".to_string()]).is_err());
    }

    #[test]
    fn mismatched_fixture_is_rejected() {
        let doc = serde_json::json!({
            "env": {"kind": "lineworld"},
            "backend": {"kind": "scripted", "fixture": "mastermind"}
        });
        assert!(matches!(config_from_value(doc), Err(CliError::Validation(_))));
    }

    #[test]
    fn config_echo_round_trips() {
        let c = Config::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(config_from_value(serde_json::from_str(&text).unwrap()).unwrap(), c);
    }
}
