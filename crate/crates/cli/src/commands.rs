use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use skillmdp::backend::remote::{
    ChatClient, LogprobMode, RemoteDoctor, RemoteEmbedder, RemoteEvolver, RemoteJudge, RemotePolicy, RemoteSummarizer,
};
use skillmdp::backend::scripted::{MastermindPolicy, ScriptedPolicy};
use skillmdp::backend::{ConcatAggregator, Embedder};
use skillmdp::env::episode_seed;
use skillmdp::fixtures::{self, FixtureKind, MASTERMIND_CUE};
use skillmdp::metrics::{self, ReuseScope, StorageMetrics, UsageLog};
use skillmdp::runtime::{
    collect_batch, BatchSpec, EpisodeContext, OnlineScoreValue, RuntimeError, SimilaritySelector, SkillSelector,
    ValueSelector,
};
use skillmdp::similarity::EmbeddingSimilarity;
use skillmdp::skill::BytePairEstimate;
use skillmdp::{
    maintenance, AuditRecord, Backends, EvolveContext, JaccardSimilarity, PromptTemplates, Similarity, Skill,
    SkillDraft, SkillId, SkillPool, SpecFactory, Tokenizer, Trajectory, WhitespaceTokenizer,
};

use crate::config::{BackendConfig, Config, SelectorConfig, SimilarityKind, TokenizerKind};
use crate::error::CliError;

pub const CONFIG_FILE: &str = "config.json";
pub const SEED_FILE: &str = "seed.json";
pub const POOL_DIR: &str = "pools";
pub const FINAL_POOL: &str = "pool.json";
pub const TRAJECTORY_LOG: &str = "trajectories.jsonl";
pub const AUDIT_LOG: &str = "audit.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const PLOT_FILE: &str = "plot.csv";

pub fn snapshot_name(batch: u64) -> String {
    format!("pool_{batch:04}.json")
}

/// Everything a run needs besides the pool.
pub struct Runtime {
    pub backends: Backends,
    pub similarity: Arc<dyn Similarity>,
    pub tokenizer: Box<dyn Tokenizer>,
    pub selector: Box<dyn SkillSelector>,
    pub factory: SpecFactory,
}

pub fn tokenizer(kind: TokenizerKind) -> Box<dyn Tokenizer> {
    match kind {
        TokenizerKind::Whitespace => Box::new(WhitespaceTokenizer),
        TokenizerKind::BytePairEstimate => Box::new(BytePairEstimate::default()),
    }
}

fn backends(config: &Config) -> Result<Backends, CliError> {
    match &config.backend {
        BackendConfig::Scripted { name, .. } => {
            let kind = config.fixture().expect("scripted backend has a fixture");
            let mut b = fixtures::scripted_backends(kind);
            if let Some(name) = name {
                b.policy = match kind {
                    FixtureKind::Lineworld => {
                        Arc::new(ScriptedPolicy::new(name.clone(), fixtures::lineworld_policy_rules()))
                    }
                    FixtureKind::Mastermind => Arc::new(MastermindPolicy::new(name.clone(), MASTERMIND_CUE)),
                };
            }
            Ok(b)
        }
        BackendConfig::Remote { client, prompts } => {
            let templates = PromptTemplates::default()
                .with_overrides(prompts, Path::new("."))
                .map_err(|e| CliError::Validation(format!("backend.prompts: {e}")))?;
            let client = Arc::new(ChatClient::new(client.clone())?);
            let embedder = client
                .config()
                .embedding_model
                .is_some()
                .then(|| Arc::new(RemoteEmbedder::new(client.clone())) as Arc<dyn Embedder>);
            Ok(Backends {
                policy: Arc::new(RemotePolicy::new(client.clone(), templates.clone())),
                judge: Arc::new(RemoteJudge::new(client.clone(), templates.clone())),
                doctor: Arc::new(RemoteDoctor::new(client.clone(), templates.clone())),
                aggregator: Arc::new(ConcatAggregator),
                evolver: Arc::new(RemoteEvolver::new(client.clone(), templates.clone())),
                summarizer: Arc::new(RemoteSummarizer::new(client, templates)),
                embedder,
            })
        }
    }
}

pub fn build_runtime(config: &Config) -> Result<Runtime, CliError> {
    config.validate()?;
    let backends = backends(config)?;
    let similarity: Arc<dyn Similarity> = match config.similarity {
        SimilarityKind::Jaccard => Arc::new(JaccardSimilarity),
        SimilarityKind::Embedding => {
            let embedder = backends
                .embedder
                .clone()
                .ok_or_else(|| CliError::Capability("embedding similarity needs a backend with an embedder".into()))?;
            Arc::new(EmbeddingSimilarity::new(embedder))
        }
    };
    let selector: Box<dyn SkillSelector> = match config.selector {
        SelectorConfig::Similarity => Box::new(SimilaritySelector {
            sim: similarity.clone(),
        }),
        SelectorConfig::Value { k } => Box::new(ValueSelector {
            sim: similarity.clone(),
            k,
            q: Arc::new(OnlineScoreValue),
        }),
    };
    Ok(Runtime {
        backends,
        similarity,
        tokenizer: tokenizer(config.tokenizer),
        selector,
        factory: SpecFactory::new(config.env.clone()),
    })
}

pub fn seed_drafts(config: &Config) -> Result<Vec<SkillDraft>, CliError> {
    match &config.seeds_file {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Validation(format!("cannot read seeds_file {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("seeds_file {}: {e}", path.display())))
        }
        None => Ok(match config.env {
            skillmdp::EnvSpec::Lineworld(_) => fixtures::lineworld_seeds(),
            skillmdp::EnvSpec::Mastermind(_) => fixtures::mastermind_seeds(),
        }),
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io("cannot write", path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    /// Seed handed to each batch; episode seeds derive from it and the
    /// episode's index within the batch.
    pub batch_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub batch_index: u64,
    pub trajectory: Trajectory,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub final_pool: PathBuf,
    pub pool_size: usize,
    pub records: Vec<AuditRecord>,
    pub metrics: RunMetrics,
}

fn gate_capability(config: &Config) -> Result<(), CliError> {
    if let BackendConfig::Remote { client, .. } = &config.backend {
        if client.logprob_mode == LogprobMode::None && !config.ablation.no_gate {
            return Err(CliError::Capability(
                "the gate needs action log-probabilities; set backend.client.logprob_mode or ablation.no_gate".into(),
            ));
        }
    }
    Ok(())
}

fn rollout(
    rt: &Runtime,
    pool: &SkillPool,
    config: &Config,
    batch_size: usize,
    seed: u64,
    first_episode_id: u64,
) -> Result<Vec<Trajectory>, RuntimeError> {
    let ctx = EpisodeContext {
        pool,
        policy: rt.backends.policy.as_ref(),
        judge: rt.backends.judge.as_ref(),
        selector: rt.selector.as_ref(),
        max_steps: config.pool.max_steps,
    };
    collect_batch(
        &rt.factory,
        &ctx,
        BatchSpec {
            batch_size,
            seed,
            first_episode_id,
            parallelism: config.parallelism,
        },
    )
}

/// Runs `pool.iterations` rounds of rollout and evolution, writing every
/// artifact under `run_dir`.
pub fn cmd_train(config: &Config) -> Result<TrainSummary, CliError> {
    gate_capability(config)?;
    let rt = build_runtime(config)?;
    let drafts = seed_drafts(config)?;
    if drafts.len() > config.pool.capacity {
        return Err(CliError::Validation(format!(
            "{} seed skills exceed pool.capacity {}",
            drafts.len(),
            config.pool.capacity
        )));
    }
    let mut pool = SkillPool::from_drafts(config.pool.capacity, drafts, rt.tokenizer.as_ref())
        .map_err(|e| CliError::Validation(format!("seed skills: {e}")))?;

    let dir = &config.run_dir;
    let pools = dir.join(POOL_DIR);
    fs::create_dir_all(&pools).map_err(|e| CliError::io("cannot create", &pools, e))?;
    write_file(&dir.join(CONFIG_FILE), &to_json(config))?;
    let batch_seeds: Vec<u64> = (0..config.pool.iterations)
        .map(|i| episode_seed(config.seed, i))
        .collect();
    write_file(
        &dir.join(SEED_FILE),
        &to_json(&SeedRecord {
            seed: config.seed,
            batch_seeds: batch_seeds.clone(),
        }),
    )?;
    write_file(&pools.join(snapshot_name(0)), &pool.to_json())?;

    let open = |name: &str| {
        let path = dir.join(name);
        File::create(&path)
            .map(BufWriter::new)
            .map_err(|e| CliError::io("cannot create", &path, e))
    };
    let mut traj_log = open(TRAJECTORY_LOG)?;
    let mut audit_log = open(AUDIT_LOG)?;
    let line = |w: &mut BufWriter<File>, name: &str, text: String| {
        writeln!(w, "{text}").map_err(|e| CliError::io("cannot write", &dir.join(name), e))
    };

    let params = config.evolve_params();
    let mut records = Vec::new();
    for (i, batch_seed) in batch_seeds.into_iter().enumerate() {
        let i = i as u64;
        let batch_size = config.pool.batch_size;
        let batch = match rollout(&rt, &pool, config, batch_size, batch_seed, i * batch_size as u64) {
            Ok(b) => b,
            Err(e) => {
                if let RuntimeError::Episode { partial, .. } = &e {
                    let rec = TrajectoryRecord {
                        batch_index: i,
                        trajectory: (**partial).clone(),
                    };
                    line(
                        &mut traj_log,
                        TRAJECTORY_LOG,
                        serde_json::to_string(&rec).expect("serializes"),
                    )?;
                    let _ = traj_log.flush();
                }
                return Err(e.into());
            }
        };
        for t in &batch {
            let rec = TrajectoryRecord {
                batch_index: i,
                trajectory: t.clone(),
            };
            line(
                &mut traj_log,
                TRAJECTORY_LOG,
                serde_json::to_string(&rec).expect("serializes"),
            )?;
        }
        let ctx = EvolveContext {
            backends: &rt.backends,
            similarity: rt.similarity.as_ref(),
            tokenizer: rt.tokenizer.as_ref(),
            params,
        };
        let record = maintenance::evolve(&mut pool, &batch, &ctx);
        log::info!(
            "batch {i}: mean return {:.3}, pool {}, admitted {}, pruned {}",
            record.mean_return,
            record.pool_size,
            record.admissions.len(),
            record.prunings.len()
        );
        line(
            &mut audit_log,
            AUDIT_LOG,
            serde_json::to_string(&record).expect("serializes"),
        )?;
        write_file(&pools.join(snapshot_name(i + 1)), &pool.to_json())?;
        records.push(record);
    }
    for (w, name) in [(&mut traj_log, TRAJECTORY_LOG), (&mut audit_log, AUDIT_LOG)] {
        w.flush()
            .map_err(|e| CliError::io("cannot write", &dir.join(name), e))?;
    }
    let final_pool = dir.join(FINAL_POOL);
    write_file(&final_pool, &pool.to_json())?;
    let metrics = cmd_metrics(dir)?;
    Ok(TrainSummary {
        run_dir: dir.clone(),
        final_pool,
        pool_size: pool.len(),
        records,
        metrics,
    })
}

pub fn load_pool(path: &Path) -> Result<SkillPool, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read pool file {}: {e}", path.display())))?;
    SkillPool::from_json(&text).map_err(|e| CliError::Validation(format!("pool file {}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReuseReport {
    pub in_domain: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_task: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_agent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub env: String,
    pub backend: String,
    pub pool_file: PathBuf,
    pub episodes: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub success_rate: f64,
    pub reuse: ReuseReport,
    pub retrieval_ratio: Option<f64>,
    pub delta_prompt_tokens: Option<f64>,
    pub storage: StorageMetrics,
}

/// Rolls out the frozen pool for `eval.episodes` episodes.
pub fn cmd_eval(config: &Config, pool_file: &Path) -> Result<EvalReport, CliError> {
    let pool = load_pool(pool_file)?;
    if pool.is_empty() {
        return Err(CliError::Validation(format!(
            "pool file {} holds no skills",
            pool_file.display()
        )));
    }
    let rt = build_runtime(config)?;
    let e = &config.eval;
    let trajs = rollout(&rt, &pool, config, e.episodes, e.seed.unwrap_or(config.seed), 0)?;
    let returns: Vec<f64> = trajs.iter().map(|t| t.total_return).collect();
    let (mean_return, std_return) = metrics::mean_std(&returns).expect("at least one episode");
    let successes = returns.iter().filter(|r| **r >= e.success_threshold).count();
    let usage = UsageLog::from_trajectories(&trajs);
    let reuse = |scope| metrics::reuse_rate(pool.skills(), &usage, &scope).ok();
    Ok(EvalReport {
        env: config.env.env_name(),
        backend: rt.backends.policy.name().to_string(),
        pool_file: pool_file.to_path_buf(),
        episodes: trajs.len(),
        mean_return,
        std_return,
        success_rate: successes as f64 / trajs.len() as f64,
        reuse: ReuseReport {
            in_domain: reuse(ReuseScope::InDomain),
            cross_task: e
                .learned_task
                .clone()
                .and_then(|t| reuse(ReuseScope::CrossTask { learned_task: t })),
            cross_agent: e
                .learned_agent
                .clone()
                .and_then(|a| reuse(ReuseScope::CrossAgent { learned_agent: a })),
        },
        retrieval_ratio: metrics::retrieval_ratio(&trajs).ok(),
        delta_prompt_tokens: metrics::delta_prompt_tokens(&trajs, rt.tokenizer.as_ref()).ok(),
        storage: metrics::storage_metrics(pool.skills()),
    })
}

fn chain(skill: &Skill, by_id: &BTreeMap<SkillId, &Skill>) -> String {
    let mut parts = vec![format!("{} v{} ({})", skill.name, skill.version, skill.id)];
    let mut cur = skill;
    while let Some(pid) = cur.parent_id {
        match by_id.get(&pid) {
            Some(p) => {
                parts.push(format!("{} v{} ({})", p.name, p.version, p.id));
                cur = p;
            }
            None => {
                parts.push(format!("{pid} (pruned)"));
                break;
            }
        }
    }
    parts.reverse();
    parts.join(" -> ")
}

/// Text listing of a pool file: one block per skill, then lineage chains.
pub fn cmd_inspect(pool_file: &Path) -> Result<String, CliError> {
    let pool = load_pool(pool_file)?;
    let mut out = format!(
        "pool: {} skill(s), capacity {}, batch {}, step baseline {:.4}, return baseline {:.4}\n",
        pool.len(),
        pool.capacity(),
        pool.batch_index,
        pool.step_baseline,
        pool.return_baseline
    );
    for s in pool.skills() {
        out.push_str(&format!(
            "\n{} {} v{}  score {:.4}  invocations {}  created batch {}  tokens {}\n",
            s.id,
            s.name,
            s.version,
            s.online_score(),
            s.invocations,
            s.created_batch,
            s.token_count
        ));
        out.push_str(&format!("  when:  {}\n", s.initiation));
        for (i, step) in s.policy_steps.iter().enumerate() {
            out.push_str(&format!("  {:>2}.   {step}\n", i + 1));
        }
        out.push_str(&format!("  until: {}\n", s.termination));
    }
    let by_id: BTreeMap<SkillId, &Skill> = pool.skills().iter().map(|s| (s.id, s)).collect();
    let lineages: Vec<String> = pool
        .skills()
        .iter()
        .filter(|s| s.parent_id.is_some() && !pool.skills().iter().any(|c| c.parent_id == Some(s.id)))
        .map(|s| chain(s, &by_id))
        .collect();
    if !lineages.is_empty() {
        out.push_str("\nlineage:\n");
        for l in lineages {
            out.push_str(&format!("  {l}\n"));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub batch_index: u64,
    pub mean_return: f64,
    pub std_return: f64,
    pub pool_size: usize,
    pub mean_online_score: f64,
    pub gate_pass_rate: Option<f64>,
    pub admissions: usize,
    pub prunings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub batches: Vec<BatchMetrics>,
    /// Admissions over skills that reached the gate, across the run.
    pub gate_pass_rate: Option<f64>,
    pub reuse_rate: Option<f64>,
    pub retrieval_ratio: Option<f64>,
    pub delta_prompt_tokens: Option<f64>,
    pub storage: StorageMetrics,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let file = File::open(path).map_err(|e| CliError::Validation(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io("cannot read", path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| CliError::Validation(format!("{} line {}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

#[derive(Serialize)]
struct PlotRow {
    batch_index: u64,
    mean_return: f64,
    pool_size: usize,
    mean_online_score: f64,
}

/// Recomputes run metrics from the logs in `run_dir` and rewrites the metrics
/// report and plot data.
pub fn cmd_metrics(run_dir: &Path) -> Result<RunMetrics, CliError> {
    let config_path = run_dir.join(CONFIG_FILE);
    let config_text = fs::read_to_string(&config_path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", config_path.display())))?;
    let config: Config = serde_json::from_str(&config_text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", config_path.display())))?;
    let trajs: Vec<TrajectoryRecord> = read_jsonl(&run_dir.join(TRAJECTORY_LOG))?;
    let audits: Vec<AuditRecord> = read_jsonl(&run_dir.join(AUDIT_LOG))?;
    let pool = load_pool(&run_dir.join(FINAL_POOL))?;

    let mut by_batch: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for r in &trajs {
        by_batch
            .entry(r.batch_index)
            .or_default()
            .push(r.trajectory.total_return);
    }
    let batches: Vec<BatchMetrics> = audits
        .iter()
        .map(|a| {
            let std_return = by_batch
                .get(&a.batch_index)
                .and_then(|v| metrics::mean_std(v))
                .map_or(0.0, |(_, s)| s);
            BatchMetrics {
                batch_index: a.batch_index,
                mean_return: a.mean_return,
                std_return,
                pool_size: a.pool_size,
                mean_online_score: a.mean_online_score,
                gate_pass_rate: a.gate_pass_rate,
                admissions: a.admissions.len(),
                prunings: a.prunings.len(),
            }
        })
        .collect();
    let gated: usize = audits.iter().map(|a| a.gated_skills).sum();
    let admitted: usize = audits.iter().map(|a| a.admissions.len()).sum();
    let all: Vec<Trajectory> = trajs.into_iter().map(|r| r.trajectory).collect();
    let usage = UsageLog::from_trajectories(&all);
    let tok = tokenizer(config.tokenizer);
    let report = RunMetrics {
        batches,
        gate_pass_rate: (gated > 0).then(|| admitted as f64 / gated as f64),
        reuse_rate: metrics::reuse_rate(pool.skills(), &usage, &ReuseScope::InDomain).ok(),
        retrieval_ratio: metrics::retrieval_ratio(&all).ok(),
        delta_prompt_tokens: metrics::delta_prompt_tokens(&all, tok.as_ref()).ok(),
        storage: metrics::storage_metrics(pool.skills()),
    };
    write_file(&run_dir.join(METRICS_FILE), &to_json(&report))?;
    let plot_path = run_dir.join(PLOT_FILE);
    let mut w = csv::Writer::from_path(&plot_path)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", plot_path.display())))?;
    for b in &report.batches {
        w.serialize(PlotRow {
            batch_index: b.batch_index,
            mean_return: b.mean_return,
            pool_size: b.pool_size,
            mean_online_score: b.mean_online_score,
        })
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", plot_path.display())))?;
    }
    w.flush().map_err(|e| CliError::io("cannot write", &plot_path, e))?;
    Ok(report)
}
