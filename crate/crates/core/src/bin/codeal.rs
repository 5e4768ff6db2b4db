//! Command-line driver: simulation studies, imputation on CSV panels,
//! evaluation against ground truth and counterfactual series export.
//!
//! Exit codes: 0 success, 2 usage, 3 data, 4 numeric failure. Failures print
//! one machine-readable line on stderr.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use codeal::covariate::RemovalKind;
use codeal::error::ErrorClass;
use codeal::estimator::{run_estimator, EstimatorKind};
use codeal::io::{self, InputPaths, Mode, RunConfig, Summary};
use codeal::simulation::{self, DgpConfig, EstimatorSpec, ExperimentConfig};
use codeal::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "codeal", version, about, propagate_version = true)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Master seed; overrides the `seed` of a config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Emit structured JSON on stdout and write `summary.json`.
    #[arg(long, global = true)]
    json: bool,
    /// Worker threads. Values above 1 run replications and subproblems
    /// concurrently; results are identical either way.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Leave the generation timestamp out of `summary.json`.
    #[arg(long, global = true)]
    no_timestamp: bool,
    /// Print the effective configuration (every default included) as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a simulation study and write `results.csv`.
    Simulate(SimulateArgs),
    /// Impute counterfactuals for a panel read from CSV files.
    Impute(ImputeArgs),
    /// Score counterfactuals against known unit effects.
    Evaluate(EvaluateArgs),
    /// Write per-period observed and counterfactual totals over treated units.
    ExportCounterfactual(ExportArgs),
    /// Generate a simulated panel with its ground truth as CSV files.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// TOML run configuration with a `[dgp]` section.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in data generating process: config1, config2, config3-r5,
    /// config3-r10, config4-r5 or config4-r10. Default config1.
    #[arg(long)]
    preset: Option<String>,
    /// Number of replications; overrides the config file.
    #[arg(long)]
    reps: Option<usize>,
    /// Output directory; overrides the config file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PanelArgs {
    /// Outcome matrix CSV (units by periods).
    #[arg(long)]
    y: PathBuf,
    /// Binary treatment matrix CSV (units by periods).
    #[arg(long)]
    w: PathBuf,
    /// Covariate CSV (units by covariates).
    #[arg(long)]
    x: PathBuf,
}

impl PanelArgs {
    fn paths(&self) -> InputPaths {
        InputPaths {
            y: self.y.clone(),
            w: self.w.clone(),
            x: self.x.clone(),
        }
    }
}

fn parse_estimator(s: &str) -> std::result::Result<EstimatorKind, String> {
    EstimatorKind::parse(s).map_err(|e| e.to_string())
}

fn parse_removal(s: &str) -> std::result::Result<RemovalKind, String> {
    RemovalKind::parse(s).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
struct ImputeArgs {
    #[command(flatten)]
    panel: PanelArgs,
    /// TOML run configuration supplying `[estimator]` hyperparameters.
    #[arg(long)]
    config: Option<PathBuf>,
    /// codeal, single-ae, did, vert-reg or mc-nnm.
    #[arg(long, value_parser = parse_estimator, default_value = "codeal")]
    estimator: EstimatorKind,
    /// none, lr or dnn.
    #[arg(long, value_parser = parse_removal, default_value = "dnn")]
    covariate_removal: RemovalKind,
    /// Number of latent factors (autoencoder code size).
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    panel: PanelArgs,
    /// Counterfactual matrix CSV as written by `impute`.
    #[arg(long)]
    counterfactuals: PathBuf,
    /// True unit effects: one value column, one row per unit.
    #[arg(long)]
    tau: PathBuf,
    /// Directory for `metrics.csv`; stdout only when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[command(flatten)]
    panel: PanelArgs,
    /// Counterfactual matrix CSV as written by `impute`.
    #[arg(long)]
    counterfactuals: PathBuf,
    /// Trailing window of the rolling-mean columns.
    #[arg(long, default_value_t = 14)]
    window: usize,
    /// Omit the rolling-mean columns.
    #[arg(long)]
    no_rolling: bool,
    /// Output CSV file.
    #[arg(long, default_value = "out/series.csv")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// TOML run configuration with a `[dgp]` section.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in data generating process (see `simulate --help`).
    #[arg(long)]
    preset: Option<String>,
    /// Directory for y.csv, w.csv, x.csv, tau.csv and y0.csv.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = match e.class() {
                ErrorClass::Usage => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
            };
            if cli.global.json {
                let line = serde_json::json!({
                    "error": e.kind(),
                    "exitCode": code,
                    "message": e.to_string(),
                });
                eprintln!("{line}");
            } else {
                eprintln!("error[{}]: {e}", e.kind());
            }
            ExitCode::from(code)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    configure_threads(cli.global.threads)?;
    match &cli.command {
        Command::Simulate(args) => simulate(&cli.global, args),
        Command::Impute(args) => impute(&cli.global, args),
        Command::Evaluate(args) => evaluate(&cli.global, args),
        Command::ExportCounterfactual(args) => export(&cli.global, args),
        Command::Generate(args) => generate(&cli.global, args),
    }
}

#[cfg(feature = "parallel")]
fn configure_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        return Err(Error::InvalidConfig("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::InvalidConfig(e.to_string()))
}

#[cfg(not(feature = "parallel"))]
fn configure_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        return Err(Error::InvalidConfig("--threads must be at least 1".into()));
    }
    Ok(())
}

/// Loads the config file (or defaults) and applies the global overrides.
fn base_config(global: &Global, path: Option<&Path>, mode: Mode) -> Result<RunConfig> {
    let mut config = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    config.mode = mode;
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    config.estimator.seed = config.seed;
    config.estimator.parallel = global.threads > 1;
    if let Some(dgp) = config.dgp.as_mut() {
        dgp.seed = config.seed;
    }
    Ok(config)
}

fn dgp_config(global: &Global, config: Option<&Path>, preset: Option<&str>, mode: Mode) -> Result<RunConfig> {
    let mut run = base_config(global, config, mode)?;
    if let Some(name) = preset {
        run.dgp = Some(DgpConfig::preset(name)?.with_seed(run.seed));
    } else if run.dgp.is_none() {
        run.dgp = Some(DgpConfig::config1().with_seed(run.seed));
    }
    Ok(run)
}

fn print_config(config: &RunConfig) -> Result<()> {
    print!("{}", config.to_toml()?);
    Ok(())
}

fn write_summary(global: &Global, dir: &Path, mut summary: Summary) -> Result<()> {
    if !global.json {
        return Ok(());
    }
    if !global.no_timestamp {
        summary.generated_at = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .ok()
            .map(|d| d.as_secs());
    }
    let text = summary.to_json()?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("summary.json"), format!("{text}\n"))?;
    println!("{text}");
    Ok(())
}

fn simulate(global: &Global, args: &SimulateArgs) -> Result<()> {
    let mut run = dgp_config(global, args.config.as_deref(), args.preset.as_deref(), Mode::Simulate)?;
    if let Some(reps) = args.reps {
        run.replications = reps;
    }
    if let Some(out) = &args.out {
        run.out = out.clone();
    }
    if global.print_config {
        return print_config(&run);
    }
    run.validate()?;
    let dgp = run.dgp.clone().expect("data generating process is set");
    let table = simulation::run_experiment(&ExperimentConfig {
        dgp,
        estimators: run.estimators.clone(),
        replications: run.replications,
        estimator: run.estimator.clone(),
        parallel: global.threads > 1,
    })?;
    std::fs::create_dir_all(&run.out)?;
    io::write_results_csv(std::fs::File::create(run.out.join("results.csv"))?, &table)?;
    if !global.json {
        let mut stdout = std::io::stdout().lock();
        writeln!(stdout, "{} ({} replications)", table.dgp.name, table.replications)?;
        for row in &table.rows {
            writeln!(
                stdout,
                "  {:<10} {:<5} MAE {:.4}{}  MSE {:.4}",
                row.spec.estimator.name(),
                row.spec.removal.name(),
                row.mae.mean,
                row.mae.se.map(|s| format!(" ({s:.4})")).unwrap_or_default(),
                row.mse.mean,
            )?;
        }
    }
    let summary = Summary::new(&run).with_table(&table);
    write_summary(global, &run.out, summary)
}

fn impute(global: &Global, args: &ImputeArgs) -> Result<()> {
    let mut run = base_config(global, args.config.as_deref(), Mode::Impute)?;
    run.input = Some(args.panel.paths());
    run.dgp = None;
    run.out = args.out.clone();
    run.estimator.kind = args.estimator;
    run.estimator.removal = args.covariate_removal;
    run.estimator.factors = args.k;
    run.estimators = vec![EstimatorSpec::new(args.estimator, args.covariate_removal)];
    if global.print_config {
        return print_config(&run);
    }
    run.validate()?;
    let panel = io::load_panel(&args.panel.y, &args.panel.w, &args.panel.x)?;
    let result = run_estimator(&panel, &run.estimator)?;
    io::write_counterfactuals(&run.out.join("counterfactuals.csv"), &panel, &result)?;
    io::write_att(&run.out.join("att.csv"), &panel, &result)?;
    if !global.json {
        match result.att.overall() {
            Ok(att) => println!("overall ATT {att:.6}"),
            Err(_) => println!("no treated cells"),
        }
    }
    write_summary(global, &run.out, Summary::new(&run).with_att(&panel, &result))
}

fn evaluate(global: &Global, args: &EvaluateArgs) -> Result<()> {
    let mut run = base_config(global, None, Mode::Evaluate)?;
    run.input = Some(args.panel.paths());
    if let Some(out) = &args.out {
        run.out = out.clone();
    }
    if global.print_config {
        return print_config(&run);
    }
    let panel = io::load_panel(&args.panel.y, &args.panel.w, &args.panel.x)?;
    let counterfactuals = io::read_aligned(&args.counterfactuals, &panel)?;
    let tau = io::read_unit_vector(&args.tau, &panel)?;
    let m = simulation::metrics(&panel, &tau, &counterfactuals)?;
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(
            out.join("metrics.csv"),
            format!("mae,mse\n{},{}\n", io::fmt_f64(m.mae), io::fmt_f64(m.mse)),
        )?;
    }
    if global.json {
        println!("{}", serde_json::json!({ "mae": m.mae, "mse": m.mse }));
    } else {
        println!("MAE {:.6}  MSE {:.6}", m.mae, m.mse);
    }
    Ok(())
}

fn export(global: &Global, args: &ExportArgs) -> Result<()> {
    let mut run = base_config(global, None, Mode::ExportCounterfactual)?;
    run.input = Some(args.panel.paths());
    run.out = args.out.clone();
    if global.print_config {
        return print_config(&run);
    }
    if args.window == 0 {
        return Err(Error::InvalidConfig("--window must be at least 1".into()));
    }
    let panel = io::load_panel(&args.panel.y, &args.panel.w, &args.panel.x)?;
    let counterfactuals = io::read_aligned(&args.counterfactuals, &panel)?;
    let window = (!args.no_rolling).then_some(args.window);
    let rows = io::counterfactual_series(&panel, &counterfactuals, window)?;
    io::write_series(&args.out, &rows, window.is_some())?;
    if global.json {
        let text = serde_json::to_string_pretty(&rows).map_err(|e| Error::Parse(e.to_string()))?;
        println!("{text}");
    }
    Ok(())
}

fn generate(global: &Global, args: &GenerateArgs) -> Result<()> {
    let mut run = dgp_config(global, args.config.as_deref(), args.preset.as_deref(), Mode::Simulate)?;
    run.out = args.out.clone();
    if global.print_config {
        return print_config(&run);
    }
    let dgp = run.dgp.clone().expect("data generating process is set");
    let sim = simulation::generate(&dgp)?;
    io::save_simulated(&sim, &run.out)
}
