//! Sequential vs rayon execution of the two data-parallel hot spots:
//! independent replications and per-period covariate networks.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use codeal::covariate::{fit_covariates, CovariateConfig, RemovalKind};
use codeal::estimator::{EstimatorConfig, EstimatorKind};
use codeal::nn::TrainConfig;
use codeal::simulation::{generate, CovariateKind, DgpConfig, EstimatorSpec, ExperimentConfig, run_experiment};

fn replications(c: &mut Criterion) {
    let dgp = DgpConfig {
        n_units: 60,
        n_periods: 60,
        control_units: 30,
        pre_periods: 30,
        ..DgpConfig::config1()
    };
    let mut group = c.benchmark_group("replications");
    group.sample_size(10);
    for parallel in [false, true] {
        let config = ExperimentConfig {
            dgp: dgp.clone(),
            estimators: vec![
                EstimatorSpec::new(EstimatorKind::McNnm, RemovalKind::None),
                EstimatorSpec::new(EstimatorKind::VertReg, RemovalKind::None),
            ],
            replications: 8,
            estimator: EstimatorConfig::default(),
            parallel,
        };
        let label = if parallel { "rayon" } else { "sequential" };
        group.bench_with_input(BenchmarkId::new(label, 8), &config, |b, config| {
            b.iter(|| black_box(run_experiment(config).unwrap()))
        });
    }
    group.finish();
}

fn covariate_networks(c: &mut Criterion) {
    let sim = generate(&DgpConfig {
        n_periods: 40,
        pre_periods: 20,
        covariate: CovariateKind::Tanh,
        ..DgpConfig::config1()
    })
    .unwrap();
    let mut group = c.benchmark_group("covariate_networks");
    group.sample_size(10);
    for parallel in [false, true] {
        let config = CovariateConfig {
            train: TrainConfig {
                epochs: 50,
                ..CovariateConfig::default().train
            },
            parallel,
            ..CovariateConfig::default()
        };
        let label = if parallel { "rayon" } else { "sequential" };
        group.bench_with_input(BenchmarkId::new(label, 40), &config, |b, config| {
            b.iter(|| black_box(fit_covariates(&sim.panel, RemovalKind::Dnn, config).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, replications, covariate_networks);
criterion_main!(benches);
