//! Data-parallel kernels vs their sequential twins. With the default
//! `parallel` feature the first entry of each pair fans out over rayon;
//! build with `--no-default-features` to compare two sequential paths.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use polybern::guide;
use polybern::oracle;
use polybern::poly::IntervalBox;
use polybern::solver::{self, SolverConfig};
use polybern::suites;

fn bench_grid_extrema(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = oracle::random_polynomial(&mut rng, 2, 6, 12);
    let region = IntervalBox::uniform(2, -2.0, 2.0).unwrap();
    let mut group = c.benchmark_group("grid_extrema_500x500");
    group.sample_size(20);
    group.bench_function("parallel", |b| {
        b.iter(|| oracle::grid_extrema(black_box(&p), &region, 500).unwrap())
    });
    group.bench_function("sequential", |b| {
        b.iter(|| oracle::grid_extrema_seq(black_box(&p), &region, 500).unwrap())
    });
    group.finish();
}

fn bench_dataset_generation(c: &mut Criterion) {
    let mut group = c.benchmark_group("generate_dataset_256");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| guide::generate_dataset(black_box(256), 9))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| guide::generate_dataset_seq(black_box(256), 9))
    });
    group.finish();
}

fn bench_solver_workers(c: &mut Criterion) {
    let problem = suites::parse_benchmark(&suites::PVS_SUITE[4]); // butcher
    let mut group = c.benchmark_group("solve_butcher");
    group.sample_size(10);
    group.bench_function("one_worker", |b| {
        let cfg = SolverConfig::for_problem(&problem);
        b.iter(|| solver::solve(black_box(&problem), &cfg).unwrap())
    });
    group.bench_function("four_workers", |b| {
        let cfg = SolverConfig {
            workers: 4,
            ..SolverConfig::for_problem(&problem)
        };
        b.iter(|| solver::solve(black_box(&problem), &cfg).unwrap())
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_grid_extrema,
    bench_dataset_generation,
    bench_solver_workers
);
criterion_main!(benches);
