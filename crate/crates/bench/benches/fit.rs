use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gsps_bench::{fixture, fixture_model};
use gsps_core::gsps::{partition_random, stage1_blocks, GspsConfig};
use gsps_core::predict::{Predict, Predictor};
use gsps_core::stage1::{admm_solve, SolverConfig, Stage1Problem};
use gsps_core::stage2::{CovarianceBlock, Stage2Objective};
use gsps_core::{estimate_gamma, sample_grf, SimulationSpec};
use std::hint::black_box;

fn stage1(c: &mut Criterion) {
    let mut group = c.benchmark_group("admm_solve");
    group.sample_size(10);
    for n in [20usize, 40, 80] {
        let ds = fixture(n, 2, 10, 1);
        let problem = Stage1Problem::from_dataset(&ds, 0.05, None).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &problem, |b, prob| {
            b.iter(|| admm_solve(black_box(prob), &SolverConfig::default()).unwrap())
        });
    }
    group.finish();
}

fn blocking(c: &mut Criterion) {
    let mut group = c.benchmark_group("stage1_blocks_n120");
    group.sample_size(10);
    let ds = fixture(120, 2, 10, 2);
    let cfg = GspsConfig::default();
    for k in [1usize, 2, 4] {
        let part = partition_random(ds.n(), k, 3).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(k), &part, |b, part| {
            b.iter(|| stage1_blocks(&ds, &cfg, black_box(part)).unwrap())
        });
    }
    group.finish();
}

fn stage2(c: &mut Criterion) {
    let ds = fixture(60, 2, 20, 4);
    let problem = Stage1Problem::from_dataset(&ds, 0.02, None).unwrap();
    let est = admm_solve(&problem, &SolverConfig::default()).unwrap();
    let gamma = estimate_gamma(&est.c_hat, ds.n(), ds.p()).unwrap();
    let block = CovarianceBlock { locations: ds.locations().to_vec(), c_hat: est.c_hat };
    let model = fixture_model(2);
    let objective = Stage2Objective::new(model.correlation.family, &gamma, &[block]).unwrap();
    let theta = model.correlation.theta.clone();
    c.bench_function("stage2_value_and_gradient_n60", |b| b.iter(|| objective.value_and_gradient(black_box(&theta))));
    c.bench_function("stage2_hessian_n60", |b| b.iter(|| objective.hessian(black_box(&theta))));
}

fn prediction(c: &mut Criterion) {
    let ds = fixture(150, 2, 5, 5);
    let model = fixture_model(2);
    let ybar = ds.mean_response();
    c.bench_function("predictor_new_n150", |b| {
        b.iter(|| Predictor::new(model.clone(), ds.locations().to_vec(), ybar.clone()).unwrap())
    });
    let pred = Predictor::new(model.clone(), ds.locations().to_vec(), ybar).unwrap();
    let x0 = gsps_core::Location::new(vec![5.0, 5.0]).unwrap();
    c.bench_function("predict_mean_n150", |b| b.iter(|| pred.predict_mean(black_box(&x0)).unwrap()));
}

fn simulation(c: &mut Criterion) {
    let ds = fixture(100, 2, 1, 6);
    let spec = SimulationSpec {
        locations: ds.locations().to_vec(),
        model: fixture_model(2),
        num_realizations: 50,
        seed: 1,
    };
    c.bench_function("sample_grf_n100_N50", |b| b.iter(|| sample_grf(black_box(&spec)).unwrap()));
}

criterion_group!(benches, stage1, blocking, stage2, prediction, simulation);
criterion_main!(benches);
