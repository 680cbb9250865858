use canard_core::parallel::{par_map, resolve_workers};
use canard_core::sweep::{planes, sweep};
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

fn workers() -> [(&'static str, usize); 2] {
    [("sequential", 1), ("parallel", resolve_workers(0))]
}

fn sweep_plane(c: &mut Criterion) {
    let spec = planes::alpha_gamma(20);
    let mut group = c.benchmark_group("sweep_alpha_gamma_20");
    group.sample_size(10);
    for (name, n) in workers() {
        group.bench_with_input(BenchmarkId::new(name, n), &n, |b, &n| b.iter(|| sweep(black_box(&spec), n).unwrap()));
    }
    group.finish();
}

fn map_cells(c: &mut Criterion) {
    let mut group = c.benchmark_group("par_map_10k");
    for (name, n) in workers() {
        group.bench_with_input(BenchmarkId::new(name, n), &n, |b, &n| {
            b.iter(|| par_map(10_000, n, |i| (0..200).fold(i as f64, |acc, j| (acc + j as f64).sqrt())))
        });
    }
    group.finish();
}

criterion_group!(benches, sweep_plane, map_cells);
criterion_main!(benches);
