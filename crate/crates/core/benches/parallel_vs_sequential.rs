use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use sqlprobe_core::latency::{simulate, simulate_sequential, LatencyModelSpec};
use sqlprobe_core::par;

fn latency_trials(c: &mut Criterion) {
    let mut group = c.benchmark_group("latency_simulation");
    group.sample_size(20);
    for trials in [1_000usize, 10_000] {
        let spec = LatencyModelSpec { trials, ..LatencyModelSpec::default() };
        group.bench_with_input(BenchmarkId::new("rayon", trials), &spec, |b, s| b.iter(|| simulate(s).unwrap()));
        group.bench_with_input(BenchmarkId::new("sequential", trials), &spec, |b, s| {
            b.iter(|| simulate_sequential(s).unwrap())
        });
    }
    group.finish();
}

/// A CPU-bound stand-in for one probe's work.
fn busy(seed: u64) -> u64 {
    (0..200_000u64).fold(seed, |acc, i| acc.wrapping_mul(6364136223846793005).wrapping_add(i))
}

fn worker_pool(c: &mut Criterion) {
    let mut group = c.benchmark_group("bounded_pool");
    group.sample_size(20);
    for workers in [1usize, 6] {
        group.bench_function(BenchmarkId::new("workers", workers), |b| {
            b.iter(|| par::map_bounded((0..12u64).collect(), workers, busy))
        });
    }
    group.finish();
}

criterion_group!(benches, latency_trials, worker_pool);
criterion_main!(benches);
