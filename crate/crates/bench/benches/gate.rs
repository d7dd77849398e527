use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skillmdp::gate::{return_to_go, surrogate};
use skillmdp::testkit::naive_surrogate;
use skillmdp_bench::random_gate_input;

fn bench_surrogate(c: &mut Criterion) {
    let mut group = c.benchmark_group("surrogate");
    for (trajectories, len) in [(8, 20), (64, 50)] {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = random_gate_input(&mut rng, trajectories, len);
        let id = format!("{trajectories}x{len}");
        group.bench_with_input(BenchmarkId::new("optimized", &id), &input, |b, i| {
            b.iter(|| surrogate(std::hint::black_box(i)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("naive", &id), &input, |b, i| {
            b.iter(|| naive_surrogate(std::hint::black_box(i)).unwrap())
        });
    }
    group.finish();
}

fn bench_return_to_go(c: &mut Criterion) {
    let rewards: Vec<f64> = (0..1000).map(|i| (i % 7) as f64 / 7.0).collect();
    c.bench_function("return_to_go/1000", |b| {
        b.iter(|| return_to_go(std::hint::black_box(&rewards), 0.99))
    });
}

criterion_group!(benches, bench_surrogate, bench_return_to_go);
criterion_main!(benches);
