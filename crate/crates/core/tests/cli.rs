use std::path::Path;
use std::process::{Command, Output};

use nalgebra::DMatrix;

use codeal::covariate::RemovalKind;
use codeal::estimator::{run_estimator, EstimatorConfig, EstimatorKind};
use codeal::io::{self, RunConfig};
use codeal::simulation::{self, DgpConfig, ExperimentConfig};

fn codeal(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_codeal"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn small_config() -> &'static str {
    r#"
seed = 11
replications = 2
estimators = [{ estimator = "did", removal = "none" }, { estimator = "vert-reg", removal = "linear" }]

[dgp]
name = "small"
n_units = 30
n_periods = 24
control_units = 15
pre_periods = 12

[estimator]
factors = 2

[estimator.autoencoder]
bottleneck = 2

[estimator.autoencoder.train]
epochs = 30
"#
}

#[test]
fn simulate_writes_replication_means() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), small_config()).unwrap();
    let out = codeal(&["simulate", "--config", "run.toml", "--out", "res"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let run = RunConfig::from_toml(small_config()).unwrap();
    let mut dgp = run.dgp.unwrap();
    dgp.seed = run.seed;
    let table = simulation::run_experiment(&ExperimentConfig {
        dgp,
        estimators: run.estimators,
        replications: 2,
        estimator: EstimatorConfig {
            seed: run.seed,
            ..run.estimator
        },
        parallel: false,
    })
    .unwrap();
    let mut expected = Vec::new();
    io::write_results_csv(&mut expected, &table).unwrap();
    let written = std::fs::read(dir.path().join("res/results.csv")).unwrap();
    assert_eq!(String::from_utf8(written).unwrap(), String::from_utf8(expected).unwrap());
    for row in &table.rows {
        let mean = (row.replications[0].mae + row.replications[1].mae) / 2.0;
        assert!((row.mae.mean - mean).abs() < 1e-15);
    }
}

#[test]
fn missing_outcome_path_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = codeal(&["impute", "--w", "w.csv", "--x", "x.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--y") && stderr.contains("Usage"), "{stderr}");
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let out = codeal(
        &["--json", "impute", "--y", "y.csv", "--w", "w.csv", "--x", "x.csv"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));
    let line: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(line["error"], "missing_file");

    std::fs::write(dir.path().join("bad.toml"), "replications = 0\n[dgp]\n").unwrap();
    let out = codeal(&["simulate", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(dir.path().join("typo.toml"), "replicatons = 2\n").unwrap();
    let out = codeal(&["simulate", "--config", "typo.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn print_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = codeal(&["simulate", "--preset", "config4-r5", "--seed", "9", "--print-config"], dir.path());
    assert!(out.status.success());
    let config = RunConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(config.seed, 9);
    assert_eq!(config.dgp.unwrap(), DgpConfig::config4(5).with_seed(9));
}

fn read_values(path: &Path) -> DMatrix<f64> {
    io::read_matrix(path).unwrap().values
}

#[test]
fn file_pipeline_matches_in_memory_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), small_config()).unwrap();
    let out = codeal(&["generate", "--config", "run.toml", "--seed", "5", "--out", "data"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = codeal(
        &[
            "impute", "--y", "data/y.csv", "--w", "data/w.csv", "--x", "data/x.csv",
            "--config", "run.toml", "--seed", "5", "--estimator", "codeal",
            "--covariate-removal", "none", "--k", "2", "--out", "imp",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let run = RunConfig::from_toml(small_config()).unwrap();
    let sim = simulation::generate(&run.dgp.unwrap().with_seed(5)).unwrap();
    let config = EstimatorConfig {
        kind: EstimatorKind::Codeal,
        removal: RemovalKind::None,
        factors: 2,
        seed: 5,
        ..run.estimator
    };
    let (sorted, _) = codeal::panel::validate_and_sort(&sim.panel).unwrap();
    let result = run_estimator(&sorted, &config).unwrap();
    let from_files = read_values(&dir.path().join("imp/counterfactuals.csv"));
    assert_eq!(from_files, result.counterfactuals);

    let out = codeal(
        &[
            "evaluate", "--y", "data/y.csv", "--w", "data/w.csv", "--x", "data/x.csv",
            "--counterfactuals", "imp/counterfactuals.csv", "--tau", "data/tau.csv", "--json",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let metrics: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let expected = simulation::metrics(&sorted, &sorted_tau(&sim), &result.counterfactuals).unwrap();
    assert_eq!(metrics["mae"].as_f64().unwrap(), expected.mae);
}

fn sorted_tau(sim: &simulation::SimulatedPanel) -> nalgebra::DVector<f64> {
    let (_, order) = codeal::panel::validate_and_sort(&sim.panel).unwrap();
    nalgebra::DVector::from_iterator(order.len(), order.iter().map(|&i| sim.tau[i]))
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), small_config()).unwrap();
    assert!(codeal(&["generate", "--config", "run.toml", "--out", "data"], dir.path()).status.success());
    let args = [
        "--json", "--no-timestamp", "--seed", "3", "--threads", "1", "impute", "--y", "data/y.csv",
        "--w", "data/w.csv", "--x", "data/x.csv", "--config", "run.toml", "--k", "2", "--out", "imp",
    ];
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        let out = codeal(&args, dir.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let files: Vec<Vec<u8>> = ["counterfactuals.csv", "att.csv", "summary.json"]
            .iter()
            .map(|f| std::fs::read(dir.path().join("imp").join(f)).unwrap())
            .collect();
        snapshots.push((out.stdout, files));
        std::fs::remove_dir_all(dir.path().join("imp")).unwrap();
    }
    assert_eq!(snapshots[0], snapshots[1]);
}

#[test]
fn series_export_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulation::generate(&DgpConfig::config3(3).with_seed(2)).unwrap();
    io::save_simulated(&sim, dir.path()).unwrap();
    let (sorted, _) = codeal::panel::validate_and_sort(&sim.panel).unwrap();
    let config = EstimatorConfig::new(EstimatorKind::Did, RemovalKind::None, 4);
    let result = run_estimator(&sorted, &config).unwrap();
    io::write_counterfactuals(&dir.path().join("cf.csv"), &sorted, &result).unwrap();
    let out = codeal(
        &[
            "export-counterfactual", "--y", "y.csv", "--w", "w.csv", "--x", "x.csv",
            "--counterfactuals", "cf.csv", "--window", "7", "--out", "series.csv",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = io::counterfactual_series(&sorted, &result.counterfactuals, Some(7)).unwrap();
    let expected = dir.path().join("expected.csv");
    io::write_series(&expected, &rows, true).unwrap();
    assert_eq!(
        std::fs::read(dir.path().join("series.csv")).unwrap(),
        std::fs::read(expected).unwrap()
    );
}
