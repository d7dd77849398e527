//! Acceptance suite. Runs every criterion, prints one line each, and exits
//! non-zero if any fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use skillmdp::backend::scripted::{PolicyRule, ScriptedEvolver, ScriptedPolicy};
use skillmdp::env::{mastermind_feedback, EnvState};
use skillmdp::fixtures::{self, FixtureKind, LINEWORLD_CUE, SAMPLE_GRADIENT_REPLY};
use skillmdp::gate::{
    best_report, clipped_term, decide, gate_select, return_to_go, surrogate, GateInput, GateReport, GateStep,
    GateTrajectory,
};
use skillmdp::gradient::apply_gradient;
use skillmdp::maintenance::{self, lineage_terminates, prune_fifo, PruneReason};
use skillmdp::metrics::{retrieval_ratio, reuse_rate, storage_metrics, ReuseScope, UsageEvent, UsageLog};
use skillmdp::runtime::{collect_batch, BatchSpec, EpisodeContext, SimilaritySelector};
use skillmdp::testkit::{naive_peg_count, naive_return_to_go, naive_surrogate};
use skillmdp::{
    AggregatedGradient, EvolveContext, EvolveParams, GateParams, Guidance, JaccardSimilarity, RewardMode,
    SemanticGradient, Skill, SkillDraft, SkillId, SkillPool, SpecFactory, Step, Trajectory, WhitespaceTokenizer,
};
use skillmdp_cli::{cmd_train, config::config_from_value, Config};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(started: Instant, limit: Duration) -> Result<Duration, String> {
    let took = started.elapsed();
    ensure(took < limit, || format!("took {took:?}, limit {limit:?}"))?;
    Ok(took)
}

fn random_gate_input(rng: &mut ChaCha8Rng) -> GateInput {
    let n = rng.random_range(1..=8);
    let mut trajectories: Vec<GateTrajectory> = (0..n)
        .map(|_| {
            let len = rng.random_range(1..=20);
            let rewards = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut steps = Vec::new();
            for index in 0..len {
                if rng.random_bool(0.7) {
                    let beh = rng.random_range(-6.0..0.0);
                    steps.push(GateStep {
                        index,
                        behavior_logprob: beh,
                        candidate_logprob: beh + rng.random_range(-3.0..=3.0),
                    });
                }
            }
            GateTrajectory { rewards, steps }
        })
        .collect();
    if trajectories.iter().all(|t| t.steps.is_empty()) {
        trajectories[0].steps.push(GateStep {
            index: 0,
            behavior_logprob: -1.0,
            candidate_logprob: -0.5,
        });
    }
    GateInput {
        trajectories,
        gamma: [0.5, 0.9, 1.0][rng.random_range(0..3)],
        epsilon: [0.1, 0.2, 0.3][rng.random_range(0..3)],
        return_baseline: rng.random_range(-0.5..0.5),
    }
}

fn c1_gate_oracle() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let input = random_gate_input(&mut rng);
        let fast = surrogate(&input).map_err(|e| format!("case {case}: {e}"))?.value;
        let slow = naive_surrogate(&input).ok_or_else(|| format!("case {case}: oracle undefined"))?;
        worst = worst.max((fast - slow).abs());
        ensure(worst < 1e-9, || format!("case {case}: {fast} vs {slow}"))?;
    }
    let took = within(started, Duration::from_secs(5))?;
    Ok(format!("1000 inputs, max |diff| {worst:.1e}, {took:.2?}"))
}

fn c2_clip() -> Check {
    let examples = [((1.0, 0.7, 0.3), 0.7), ((1.5, 1.0, 0.2), 1.2), ((0.5, -1.0, 0.2), -0.8)];
    for ((rho, adv, eps), want) in examples {
        let got = clipped_term(rho, adv, eps).map_err(|e| e.to_string())?;
        ensure(got == want, || {
            format!("clipped_term({rho}, {adv}, {eps}) = {got}, want {want}")
        })?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10_000 {
        let rho = rng.random_range(-13.8f64..13.8).exp();
        let adv = rng.random_range(-10.0..10.0);
        let eps = rng.random_range(0.01..0.5);
        let got = clipped_term(rho, adv, eps).map_err(|e| e.to_string())?;
        ensure(got <= rho * adv, || {
            format!("{got} > rho*adv for ({rho}, {adv}, {eps})")
        })?;
    }
    Ok("3 worked examples exact, 10000 triples bounded by rho*A".into())
}

fn c3_return_to_go() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..1000 {
        // Quarter-step rewards and dyadic discounts keep every partial sum
        // exactly representable, so exact equality is meaningful.
        let len = rng.random_range(0..=20);
        let rewards: Vec<f64> = (0..len).map(|_| f64::from(rng.random_range(-4i32..=4)) / 4.0).collect();
        let gamma = [0.25, 0.5, 1.0][rng.random_range(0..3)];
        let (fast, slow) = (return_to_go(&rewards, gamma), naive_return_to_go(&rewards, gamma));
        ensure(fast == slow, || format!("case {case}: {fast:?} vs {slow:?}"))?;
    }
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let len = rng.random_range(1..=20);
        let rewards: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gamma = rng.random_range(0.05..=1.0);
        for (a, b) in return_to_go(&rewards, gamma)
            .iter()
            .zip(naive_return_to_go(&rewards, gamma))
        {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst < 1e-12, || format!("real-valued rewards differ by {worst}"))?;
    let ex = return_to_go(&[0.0, 0.0, 1.0], 0.5);
    ensure(ex == vec![0.25, 0.5, 1.0], || format!("[0,0,1] at 0.5 gave {ex:?}"))?;
    Ok(format!(
        "1000 exact dyadic sequences, real-valued max |diff| {worst:.1e}, worked example exact"
    ))
}

fn c4_mastermind() -> Check {
    let started = Instant::now();
    let codes: Vec<Vec<u8>> = (1..=3u8)
        .flat_map(|a| (1..=3u8).filter(move |&b| b != a).map(move |b| vec![a, b]))
        .collect();
    let mut pairs = 0;
    for s in &codes {
        for g in &codes {
            let fast = mastermind_feedback(s, g).map_err(|e| e.to_string())?;
            ensure(Some(fast) == naive_peg_count(s, g), || format!("{s:?} vs {g:?}"))?;
            pairs += 1;
        }
    }
    ensure(pairs == 36, || format!("{pairs} pairs"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10_000 {
        let s: Vec<u8> = (0..4).map(|_| rng.random_range(1..=6)).collect();
        let g: Vec<u8> = (0..4).map(|_| rng.random_range(1..=6)).collect();
        let fast = mastermind_feedback(&s, &g).map_err(|e| e.to_string())?;
        ensure(Some(fast) == naive_peg_count(&s, &g), || format!("{s:?} vs {g:?}"))?;
    }
    let took = within(started, Duration::from_secs(2))?;
    Ok(format!("36 exhaustive + 10000 random pairs agree, {took:.2?}"))
}

fn scripted_config(
    env: serde_json::Value,
    run_dir: &std::path::Path,
    extra: serde_json::Value,
) -> Result<Config, String> {
    let mut doc = json!({
        "env": env,
        "backend": {"kind": "scripted"},
        "run_dir": run_dir,
    });
    for (k, v) in extra.as_object().cloned().unwrap_or_default() {
        doc[k] = v;
    }
    config_from_value(doc).map_err(|e| e.to_string())
}

fn c5_determinism() -> Check {
    let started = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut finals = Vec::new();
    for run in ["a", "b"] {
        let config = scripted_config(
            json!({"kind": "mastermind"}),
            &tmp.path().join(run),
            json!({"seed": 42, "pool": {"iterations": 5, "batch_size": 8}, "parallelism": 4}),
        )?;
        let summary = cmd_train(&config).map_err(|e| e.to_string())?;
        finals.push(std::fs::read(&summary.final_pool).map_err(|e| e.to_string())?);
    }
    let took = within(started, Duration::from_secs(1))?;
    ensure(finals[0] == finals[1], || "final pool files differ".into())?;
    Ok(format!("two runs, {} identical bytes, {took:.2?}", finals[0].len()))
}

fn state(text: &str) -> EnvState {
    EnvState {
        text: text.into(),
        admissible: None,
        terminal: false,
        step_index: 0,
    }
}

fn one_step(episode_id: u64, skill: SkillId, text: &str, reward: f64) -> Trajectory {
    Trajectory {
        episode_id,
        steps: vec![Step {
            state: state(text),
            skill_id: skill,
            action: "act".into(),
            behavior_logprob: 0.0,
            reward,
            skill_started: true,
            skill_terminated: true,
            prompt: None,
        }],
        total_return: reward,
        env_name: "Synthetic".into(),
        backend_name: "scripted".into(),
        final_state: None,
    }
}

/// Two single-step trajectories with advantages +2 and -1. The candidate's
/// ratio on the first is its listed value and 1 on the second, so
/// J = (2 * min(rho, clip(rho)) - 1) / 2.
fn gate_with_ratios(ratios: &[f64]) -> Result<(Vec<GateReport>, Option<SkillId>), String> {
    let tok = WhitespaceTokenizer;
    let mut pool = SkillPool::from_drafts(
        8,
        vec![SkillDraft::new("Parent", "when", vec!["act".into()], "stop")],
        &tok,
    )
    .map_err(|e| e.to_string())?;
    let parent = pool.skills()[0].clone();
    let mut rules = Vec::new();
    let mut candidates = Vec::new();
    for (i, rho) in ratios.iter().enumerate() {
        let name = format!("Cand{i}");
        let child = pool
            .mint(
                SkillDraft::new(name.clone(), "when", vec!["act".into()], "stop"),
                Some(&parent),
                &tok,
            )
            .map_err(|e| e.to_string())?;
        rules.push(PolicyRule::new(
            Some("good"),
            Some(&format!("Name: {name}\n")),
            "act",
            rho.ln(),
        ));
        candidates.push(child);
    }
    rules.push(PolicyRule::new(Some("bad"), None, "act", 0.0));
    let scorer = ScriptedPolicy::new("scorer", rules);
    let batch = vec![one_step(0, parent.id, "good", 2.0), one_step(1, parent.id, "bad", -1.0)];
    let out = gate_select(
        &candidates,
        &parent,
        &batch,
        &pool,
        &scorer,
        &GateParams::default(),
        0.0,
        0,
    );
    Ok((out.reports, out.accepted))
}

fn c6_strict_positivity() -> Check {
    let (reports, accepted) = gate_with_ratios(&[0.8, 0.4, 1.0])?;
    let js: Vec<f64> = reports.iter().map(|r| r.surrogate.unwrap_or(f64::NAN)).collect();
    for (got, want) in js.iter().zip([0.3, -0.1, 0.5]) {
        ensure((got - want).abs() < 1e-12, || format!("J values {js:?}"))?;
    }
    let winner = reports.iter().find(|r| r.accepted).map(|r| r.candidate);
    ensure(
        accepted.is_some() && accepted == winner && winner == Some(reports[2].candidate),
        || format!("accepted {accepted:?}, reports {js:?}"),
    )?;
    ensure(reports.iter().filter(|r| r.accepted).count() == 1, || {
        "more than one accepted".into()
    })?;

    let (reports, accepted) = gate_with_ratios(&[0.4, 0.2, 0.3])?;
    ensure(accepted.is_none() && reports.iter().all(|r| !r.accepted), || {
        format!("non-positive set admitted {accepted:?}")
    })?;
    let mut zero = reports.clone();
    zero[0].surrogate = Some(0.0);
    ensure(decide(&mut zero).is_none(), || "J = 0 was admitted".into())?;
    Ok(format!(
        "J = {js:?} admits only the 0.5 candidate; non-positive sets admit none"
    ))
}

fn c7_pool_stress() -> Check {
    let tok = WhitespaceTokenizer;
    let sim = std::sync::Arc::new(JaccardSimilarity);
    let selector = SimilaritySelector { sim: sim.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut steps = 0;
    let mut admitted = 0;
    let mut pruned = 0;
    while steps < 200 {
        let kind = if rng.random_bool(0.5) {
            FixtureKind::Lineworld
        } else {
            FixtureKind::Mastermind
        };
        let capacity = rng.random_range(1..=4);
        let backends = fixtures::scripted_backends(kind);
        let factory = SpecFactory::new(fixtures::env_spec(kind));
        let drafts: Vec<SkillDraft> = fixtures::seeds(kind).into_iter().take(capacity).collect();
        let mut pool = SkillPool::from_drafts(capacity, drafts, &tok).map_err(|e| e.to_string())?;
        let mut known: BTreeMap<SkillId, Skill> = pool.skills().iter().map(|s| (s.id, s.clone())).collect();
        for _ in 0..20 {
            let ctx = EpisodeContext {
                pool: &pool,
                policy: backends.policy.as_ref(),
                judge: backends.judge.as_ref(),
                selector: &selector,
                max_steps: rng.random_range(3..=10),
            };
            let spec = BatchSpec {
                batch_size: rng.random_range(1..=6),
                seed: rng.random(),
                first_episode_id: 0,
                parallelism: 1,
            };
            let batch = collect_batch(&factory, &ctx, spec).map_err(|e| e.to_string())?;
            let mut params = EvolveParams {
                n_candidates: rng.random_range(1..=3),
                reward_mode: if rng.random_bool(0.5) {
                    RewardMode::PerStep
                } else {
                    RewardMode::TrajectoryLevel
                },
                ..EvolveParams::default()
            };
            params.ablation.no_gate = rng.random_bool(0.5);
            let ectx = EvolveContext {
                backends: &backends,
                similarity: sim.as_ref(),
                tokenizer: &tok,
                params,
            };
            let record = maintenance::evolve(&mut pool, &batch, &ectx);
            steps += 1;
            admitted += record.admissions.len();
            pruned += record.prunings.len();
            ensure(pool.len() <= capacity, || {
                format!("step {steps}: {} skills over capacity {capacity}", pool.len())
            })?;
            ensure(!pool.is_empty(), || format!("step {steps}: pool emptied"))?;
            for s in pool.skills() {
                known.insert(s.id, s.clone());
                ensure(s.invocations == 0 || s.online_score() > 0.0 || pool.len() == 1, || {
                    format!(
                        "step {steps}: invoked skill {} kept at score {}",
                        s.id,
                        s.online_score()
                    )
                })?;
            }
            let all: Vec<Skill> = known.values().cloned().collect();
            for s in pool.skills() {
                ensure(lineage_terminates(s, &all), || {
                    format!("step {steps}: lineage of {} is broken", s.id)
                })?;
            }
        }
    }
    Ok(format!(
        "{steps} evolve steps, {admitted} admissions, {pruned} prunings, all invariants held"
    ))
}

fn c8_ablations() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = scripted_config(
        json!({"kind": "mastermind"}),
        tmp.path(),
        json!({"seed": 5, "pool": {"iterations": 5}, "ablation": {"no_gate": true}}),
    )?;
    let summary = cmd_train(&config).map_err(|e| e.to_string())?;
    let mut gated = 0;
    for r in &summary.records {
        if r.gated_skills == 0 {
            continue;
        }
        gated += r.gated_skills;
        ensure(r.gate_pass_rate == Some(1.0), || {
            format!("batch {} pass rate {:?}", r.batch_index, r.gate_pass_rate)
        })?;
        let mut parents: Vec<SkillId> = r.gate_reports.iter().map(|g| g.parent).collect();
        parents.dedup();
        for p in parents {
            let reports: Vec<GateReport> = r.gate_reports.iter().filter(|g| g.parent == p).cloned().collect();
            let best = best_report(&reports).unwrap_or(0);
            ensure(reports[best].accepted, || {
                format!("batch {}: best candidate of {p} not admitted", r.batch_index)
            })?;
        }
    }
    let rate = summary.metrics.gate_pass_rate;
    ensure(gated > 0 && rate == Some(1.0), || {
        format!("overall pass rate {rate:?} over {gated} gated skills")
    })?;

    let tok = WhitespaceTokenizer;
    let mut pool = SkillPool::new(1).map_err(|e| e.to_string())?;
    for (batch, score) in [(0u64, 0.9), (1, 0.5), (2, 0.1)] {
        pool.batch_index = batch;
        let mut s = pool
            .mint(
                SkillDraft::new(format!("S{batch}"), "when", vec!["do".into()], "stop"),
                None,
                &tok,
            )
            .map_err(|e| e.to_string())?;
        s.cum_gain = score;
        s.invocations = 1;
        pool.insert(s).map_err(|e| e.to_string())?;
    }
    let events = prune_fifo(&mut pool);
    let order: Vec<String> = events.iter().map(|e| e.name.clone()).collect();
    ensure(
        order == ["S0", "S1"] && events.iter().all(|e| e.reason == PruneReason::Fifo),
        || format!("eviction order {order:?}"),
    )?;
    ensure(pool.skills()[0].name == "S2", || "wrong survivor".into())?;
    Ok(format!(
        "no_gate pass rate 100% over {gated} gated skills; fifo evicted {order:?}"
    ))
}

fn c9_metrics() -> Check {
    let tok = WhitespaceTokenizer;
    let skills: Vec<Skill> = (1..=4)
        .map(|i| {
            Skill::new(
                SkillId(i),
                SkillDraft::new(format!("S{i}"), "w", vec!["d".into()], "t"),
                None,
                0,
                &tok,
            )
        })
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let log = UsageLog {
        events: [1, 2, 3, 3]
            .iter()
            .map(|&i| UsageEvent {
                skill: SkillId(i),
                task: "t".into(),
                agent: "a".into(),
            })
            .collect(),
    };
    let reuse = reuse_rate(&skills, &log, &ReuseScope::InDomain).map_err(|e| e.to_string())?;
    ensure(reuse == 0.75, || format!("reuse {reuse}"))?;

    let mut traj = one_step(0, SkillId(1), "s", 0.0);
    let template = traj.steps[0].clone();
    traj.steps = (0..10)
        .map(|i| Step {
            skill_started: [0, 3, 5, 8].contains(&i),
            ..template.clone()
        })
        .collect();
    let ratio = retrieval_ratio(&[traj]).map_err(|e| e.to_string())?;
    ensure(ratio == 0.4, || format!("retrieval ratio {ratio}"))?;

    let mut two = skills[..2].to_vec();
    two[0].token_count = 100;
    two[1].token_count = 104;
    let m = storage_metrics(&two);
    let avg = m.average().map_err(|e| e.to_string())?;
    ensure(m.total_stored_tokens == 204 && avg == 102.0, || {
        format!("storage {m:?}")
    })?;
    Ok(format!(
        "reuse {reuse}, retrieval {ratio}, storage ({}, {avg})",
        m.total_stored_tokens
    ))
}

fn c10_gradient_round_trip() -> Check {
    let g = SemanticGradient::parse_reply(SAMPLE_GRADIENT_REPLY, 0)?;
    ensure(g.g_initiation.is_empty(), || "initiation component not empty".into())?;
    ensure(!g.g_policy.is_empty() && !g.g_termination.is_empty(), || {
        "policy or termination empty".into()
    })?;
    let original: serde_json::Value = serde_json::from_str(SAMPLE_GRADIENT_REPLY).map_err(|e| e.to_string())?;
    let again = serde_json::to_value(g.to_reply()).map_err(|e| e.to_string())?;
    ensure(original == again, || format!("re-serialized as {again}"))?;
    let reparsed = SemanticGradient::parse_reply(&again.to_string(), 0)?;
    ensure(reparsed == g, || "second parse differs".into())?;
    Ok("doctor reply parses (empty initiation, non-empty policy and termination) and re-serializes losslessly".into())
}

fn c11_zero_gradient() -> Check {
    let tok = WhitespaceTokenizer;
    let mut pool = SkillPool::from_drafts(8, fixtures::mastermind_seeds(), &tok).map_err(|e| e.to_string())?;
    let parent = pool.skills()[1].clone();
    let empty = Guidance::Gradient(AggregatedGradient::default());
    let kids = apply_gradient(&parent, &empty, &ScriptedEvolver, 3, &mut pool, &tok, 0).map_err(|e| e.to_string())?;
    ensure(kids.len() == 3, || format!("{} candidates", kids.len()))?;
    for k in &kids {
        ensure(
            k.initiation == parent.initiation
                && k.policy_steps == parent.policy_steps
                && k.termination == parent.termination,
            || format!("candidate {} differs from parent", k.id),
        )?;
        ensure(
            k.parent_id == Some(parent.id) && k.version == parent.version + 1,
            || "lineage not set".into(),
        )?;
    }
    Ok("3 candidates, components identical to parent, lineage set".into())
}

fn c12_learning_signal() -> Check {
    let started = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = scripted_config(
        json!({"kind": "lineworld", "length": 4, "start": "random"}),
        tmp.path(),
        json!({"seed": 0, "pool": {"iterations": 10, "batch_size": 8, "max_steps": 8}}),
    )?;
    let summary = cmd_train(&config).map_err(|e| e.to_string())?;
    let took = within(started, Duration::from_secs(2))?;
    let returns: Vec<f64> = summary.records.iter().map(|r| r.mean_return).collect();
    ensure(returns.len() == 10, || format!("{} batches", returns.len()))?;
    ensure(returns[0] < 0.5, || format!("first batch already at {}", returns[0]))?;
    ensure(returns[9] == 1.0, || format!("returns {returns:?}"))?;
    let admitted: usize = summary.records.iter().map(|r| r.admissions.len()).sum();
    ensure(admitted >= 1, || "no child was admitted".into())?;
    let pool = skillmdp_cli::commands::load_pool(&summary.final_pool).map_err(|e| e.to_string())?;
    let top = pool
        .skills()
        .iter()
        .max_by(|a, b| a.online_score().total_cmp(&b.online_score()))
        .ok_or("final pool is empty")?;
    ensure(top.render().contains(LINEWORLD_CUE), || {
        format!("top skill {} lacks the cue", top.name)
    })?;
    Ok(format!(
        "mean return {:.3} -> {:.3} over 10 batches, {admitted} admission(s), {took:.2?}",
        returns[0], returns[9]
    ))
}

type Criterion = (&'static str, fn() -> Check);

fn main() {
    let criteria: [Criterion; 12] = [
        ("gate surrogate matches the naive oracle", c1_gate_oracle),
        ("clip identities and pessimistic bound", c2_clip),
        ("return-to-go matches direct summation", c3_return_to_go),
        ("mastermind feedback matches the double-loop oracle", c4_mastermind),
        ("training is byte-for-byte deterministic", c5_determinism),
        ("gate admits only a strictly positive argmax", c6_strict_positivity),
        ("pool invariants hold under 200 random evolve steps", c7_pool_stress),
        ("no_gate and fifo ablation contracts", c8_ablations),
        ("metric hand counts", c9_metrics),
        ("gradient schema round trip", c10_gradient_round_trip),
        ("zero-gradient identity", c11_zero_gradient),
        ("end-to-end learning signal on LineWorld", c12_learning_signal),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("[PASS] {:>2}. {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {:>2}. {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
