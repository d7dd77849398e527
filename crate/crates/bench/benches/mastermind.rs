use criterion::{criterion_group, criterion_main, Criterion};
use skillmdp::env::mastermind::{
    mastermind_consistent_codes, mastermind_feedback, Difficulty, MastermindConfig, PegFeedback,
    DEFAULT_ENUMERATION_CAP,
};

fn bench_feedback(c: &mut Criterion) {
    c.bench_function("feedback/len4", |b| {
        b.iter(|| mastermind_feedback(std::hint::black_box(&[3, 2, 5, 6]), std::hint::black_box(&[3, 2, 1, 6])))
    });
}

fn bench_consistent(c: &mut Criterion) {
    let mut group = c.benchmark_group("consistent_codes");
    let v0 = MastermindConfig::tier(Difficulty::V0);
    let history = vec![(vec![1, 2, 3, 4], PegFeedback { black: 0, white: 2 })];
    group.bench_function("v0", |b| {
        b.iter(|| mastermind_consistent_codes(&history, &v0, DEFAULT_ENUMERATION_CAP).unwrap())
    });
    let hard = MastermindConfig::tier(Difficulty::Hard);
    let history = vec![(vec![1, 2, 3, 4, 5], PegFeedback { black: 1, white: 2 })];
    group.sample_size(10);
    group.bench_function("hard", |b| {
        b.iter(|| mastermind_consistent_codes(&history, &hard, DEFAULT_ENUMERATION_CAP).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_feedback, bench_consistent);
criterion_main!(benches);
