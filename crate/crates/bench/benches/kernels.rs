use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rkb_core::minimax::{MinimaxProblem, PolicyClass, SearchOptions};
use rkb_core::*;

fn scalar(horizon: f64, steps: usize) -> ValidatedModel {
    let grid = TimeGrid::new(horizon, steps).unwrap();
    validate_model(ConstantCoefficients::scalar(-1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0).broadcast(steps), grid).unwrap()
}

fn riccati(c: &mut Criterion) {
    let mut g = c.benchmark_group("riccati");
    for steps in [1_000, 20_000] {
        let m = scalar(20.0, steps);
        g.bench_with_input(BenchmarkId::from_parameter(steps), &m, |b, m| {
            b.iter(|| solve_riccati(black_box(m)).unwrap())
        });
    }
    g.finish();
}

fn error_stats(c: &mut Criterion) {
    let m = scalar(1.0, 1_000);
    let p = solve_riccati(&m).unwrap();
    let theta = DriftPolicy::constant(1_000, &[1.0]);
    let hat = DriftPolicy::constant(1_000, &[0.5]);
    c.bench_function("error_stats/1000", |b| {
        b.iter(|| solve_error_stats(&m, black_box(&theta), black_box(&hat), &p).unwrap())
    });
}

fn monte_carlo(c: &mut Criterion) {
    let m = scalar(1.0, 1_000);
    let theta = DriftPolicy::constant(1_000, &[1.0]);
    let mut g = c.benchmark_group("mse_monte_carlo");
    g.sample_size(10);
    g.bench_function("1000_paths", |b| {
        b.iter(|| mse_monte_carlo(&m, &theta, &theta, 1.0, 1_000, 1).unwrap())
    });
    g.finish();
}

fn decomposition(c: &mut Criterion) {
    let m = scalar(2.0, 2_000);
    let theta = DriftPolicy::constant(2_000, &[1.0]);
    let obs = simulate_path(&m, &theta, 3, 0).unwrap().observation_increments();
    let p = solve_riccati(&m).unwrap();
    let engine = FilterEngine::new(&m, Arc::new(p.clone())).unwrap();
    let kernel = CorrectionKernel::new(&m, &p).unwrap();
    c.bench_function("decomposition/2000", |b| {
        b.iter(|| DecompositionTable::build(&engine, &kernel, &theta, black_box(&obs)).unwrap())
    });
}

fn saddle(c: &mut Criterion) {
    let m = scalar(1.0, 1_000);
    let problem = MinimaxProblem::new(&m, UncertaintyBound::uniform(1, 1.0).unwrap(), 1.0).unwrap();
    let opts = SearchOptions::default();
    let mut g = c.benchmark_group("saddle_report");
    g.sample_size(10);
    g.bench_function("constant", |b| {
        b.iter(|| problem.saddle_report(PolicyClass::Constant, PolicyClass::Constant, &opts).unwrap())
    });
    g.finish();
}

criterion_group!(benches, riccati, error_stats, monte_carlo, decomposition, saddle);
criterion_main!(benches);
