//! CSV ingestion and export, counterfactual series, result tables and the
//! TOML run configuration.
//!
//! Matrix files have a header row (first cell names the unit column, the
//! rest are period or covariate labels) and one row per unit whose first
//! field is the unit label. Values are written with 17 significant digits so
//! a save/load round trip is exact.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{EstimatorConfig, ImputationResult};
use crate::panel::{indicator_from_numeric, validate_and_sort, PanelDataset};
use crate::simulation::{DgpConfig, EstimatorSpec, Metrics, ResultsTable, SimulatedPanel};

/// Parsed matrix file.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub values: DMatrix<f64>,
}

fn file_name(path: &Path) -> String {
    path.display().to_string()
}

/// Reads a labeled numeric matrix. Row and column indices in errors are
/// 1-based positions in the file, header included.
pub fn read_matrix(path: &Path) -> Result<LabeledMatrix> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", file_name(path))))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse(format!("{}: {e}", file_name(path))))?
        .clone();
    if headers.len() < 2 {
        return Err(Error::HeaderMismatch(format!(
            "{} needs a label column and at least one value column",
            file_name(path)
        )));
    }
    let col_labels: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut row_labels = Vec::new();
    let mut values = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(format!("{}: {e}", file_name(path))))?;
        if record.len() != headers.len() {
            return Err(Error::HeaderMismatch(format!(
                "{} row {} has {} fields, header has {}",
                file_name(path),
                r + 2,
                record.len(),
                headers.len()
            )));
        }
        row_labels.push(record[0].to_string());
        for (c, field) in record.iter().enumerate().skip(1) {
            let v: f64 = field.parse().map_err(|_| Error::NonNumericCell {
                file: file_name(path),
                row: r + 2,
                col: c + 1,
            })?;
            values.push(v);
        }
    }
    let values = DMatrix::from_row_slice(row_labels.len(), col_labels.len(), &values);
    Ok(LabeledMatrix {
        row_labels,
        col_labels,
        values,
    })
}

fn row_index(m: &LabeledMatrix, what: &str) -> Result<HashMap<String, usize>> {
    let mut index = HashMap::with_capacity(m.row_labels.len());
    for (i, label) in m.row_labels.iter().enumerate() {
        if index.insert(label.clone(), i).is_some() {
            return Err(Error::JoinFailure(format!("{label} (duplicate row in {what})")));
        }
    }
    Ok(index)
}

fn join_rows(base: &[String], other: &LabeledMatrix, what: &str) -> Result<DMatrix<f64>> {
    let index = row_index(other, what)?;
    if other.row_labels.len() != base.len() {
        if let Some(extra) = other.row_labels.iter().find(|l| !base.contains(l)) {
            return Err(Error::JoinFailure(format!("{extra} (only in {what})")));
        }
    }
    let mut out = DMatrix::zeros(base.len(), other.values.ncols());
    for (i, label) in base.iter().enumerate() {
        let j = *index
            .get(label)
            .ok_or_else(|| Error::JoinFailure(format!("{label} (missing from {what})")))?;
        out.row_mut(i).copy_from(&other.values.row(j));
    }
    Ok(out)
}

/// Loads, joins and validates a panel from outcome, treatment and covariate
/// files. The result is in sorted order (never-treated first, then later
/// adopters before earlier ones).
pub fn load_panel(y_path: &Path, w_path: &Path, x_path: &Path) -> Result<PanelDataset> {
    let y = read_matrix(y_path)?;
    let w = read_matrix(w_path)?;
    let x = read_matrix(x_path)?;
    if y.col_labels != w.col_labels {
        return Err(Error::HeaderMismatch(format!(
            "period labels of {} and {} differ",
            file_name(y_path),
            file_name(w_path)
        )));
    }
    row_index(&y, "outcomes")?;
    let w_values = join_rows(&y.row_labels, &w, "treatment")?;
    let x_values = join_rows(&y.row_labels, &x, "covariates")?;
    let treatment = indicator_from_numeric(&w_values)?;
    let panel = PanelDataset::with_labels(y.values, treatment, x_values, y.row_labels, y.col_labels)?;
    let (sorted, _) = validate_and_sort(&panel)?;
    Ok(sorted)
}

fn write_matrix<W: Write>(
    out: W,
    corner: &str,
    row_labels: &[String],
    col_labels: &[String],
    cell: impl Fn(usize, usize) -> String,
) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Parse(e.to_string());
    let mut header = vec![corner.to_string()];
    header.extend(col_labels.iter().cloned());
    writer.write_record(&header).map_err(csv_err)?;
    for (i, label) in row_labels.iter().enumerate() {
        let mut record = vec![label.clone()];
        record.extend((0..col_labels.len()).map(|c| cell(i, c)));
        writer.write_record(&record).map_err(csv_err)?;
    }
    writer.flush()?;
    Ok(())
}

/// Formats a value with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn create(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(File::create(path)?)
}

pub fn write_values(path: &Path, row_labels: &[String], col_labels: &[String], m: &DMatrix<f64>) -> Result<()> {
    write_matrix(create(path)?, "unit", row_labels, col_labels, |i, c| fmt_f64(m[(i, c)]))
}

/// Paths of the three panel files inside a directory.
pub fn panel_paths(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (dir.join("y.csv"), dir.join("w.csv"), dir.join("x.csv"))
}

/// Writes `y.csv`, `w.csv` and `x.csv` into `dir`.
pub fn save_panel(panel: &PanelDataset, dir: &Path) -> Result<()> {
    let (y, w, x) = panel_paths(dir);
    let units = panel.unit_labels();
    let periods = panel.period_labels();
    write_values(&y, units, periods, panel.outcomes())?;
    write_matrix(create(&w)?, "unit", units, periods, |i, c| {
        if panel.treatment()[(i, c)] { "1" } else { "0" }.to_string()
    })?;
    let names: Vec<String> = (0..panel.n_covariates()).map(|p| format!("x{p}")).collect();
    write_values(&x, units, &names, panel.covariates())
}

/// Writes a simulated panel plus its ground truth: `tau.csv` (unit effects)
/// and `y0.csv` (untreated potential outcomes).
pub fn save_simulated(sim: &SimulatedPanel, dir: &Path) -> Result<()> {
    save_panel(&sim.panel, dir)?;
    let units = sim.panel.unit_labels();
    write_values(&dir.join("tau.csv"), units, &["tau".to_string()], &DMatrix::from_column_slice(units.len(), 1, sim.tau.as_slice()))?;
    write_values(&dir.join("y0.csv"), units, sim.panel.period_labels(), &sim.untreated_outcomes())
}

/// Aligns a matrix file to the panel's unit and period order.
pub fn read_aligned(path: &Path, panel: &PanelDataset) -> Result<DMatrix<f64>> {
    let m = read_matrix(path)?;
    if m.col_labels != panel.period_labels() {
        return Err(Error::HeaderMismatch(format!(
            "period labels of {} differ from the panel",
            file_name(path)
        )));
    }
    join_rows(panel.unit_labels(), &m, &file_name(path))
}

/// Reads a one-column unit-effect file aligned to the panel's units.
pub fn read_unit_vector(path: &Path, panel: &PanelDataset) -> Result<DVector<f64>> {
    let m = read_matrix(path)?;
    if m.values.ncols() != 1 {
        return Err(Error::HeaderMismatch(format!(
            "{} must have exactly one value column",
            file_name(path)
        )));
    }
    let aligned = join_rows(panel.unit_labels(), &m, &file_name(path))?;
    Ok(aligned.column(0).into_owned())
}

pub fn write_counterfactuals(path: &Path, panel: &PanelDataset, result: &ImputationResult) -> Result<()> {
    write_values(path, panel.unit_labels(), panel.period_labels(), &result.counterfactuals)
}

/// Per-unit effect estimates; never-treated units get an empty field.
pub fn write_att(path: &Path, panel: &PanelDataset, result: &ImputationResult) -> Result<()> {
    let mut writer = csv::Writer::from_writer(create(path)?);
    let csv_err = |e: csv::Error| Error::Parse(e.to_string());
    writer
        .write_record(["unit", "att", "treated_periods"])
        .map_err(csv_err)?;
    for (i, label) in panel.unit_labels().iter().enumerate() {
        let att = result.att.per_unit[i].map(fmt_f64).unwrap_or_default();
        let count = result.att.treated_period_counts[i].to_string();
        writer.write_record([label.as_str(), &att, &count]).map_err(csv_err)?;
    }
    writer.flush()?;
    Ok(())
}

/// One period of the aggregated counterfactual series.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesRow {
    pub period: String,
    pub observed: f64,
    pub counterfactual: f64,
    /// Trailing mean over `window` periods, absent until the window fills.
    pub observed_rolling: Option<f64>,
    pub counterfactual_rolling: Option<f64>,
}

fn trailing_mean(values: &[f64], window: usize) -> Vec<Option<f64>> {
    (0..values.len())
        .map(|t| {
            (window > 0 && t + 1 >= window)
                .then(|| values[t + 1 - window..=t].iter().sum::<f64>() / window as f64)
        })
        .collect()
}

/// Per-period totals over units that are ever treated: the observed outcome
/// and the counterfactual (observed on untreated periods, `Ŷ(0)` on treated
/// ones), with optional trailing means.
pub fn counterfactual_series(
    panel: &PanelDataset,
    counterfactuals: &DMatrix<f64>,
    window: Option<usize>,
) -> Result<Vec<SeriesRow>> {
    if counterfactuals.shape() != panel.outcomes().shape() {
        return Err(Error::ShapeMismatch("counterfactuals do not match the panel".into()));
    }
    let treated_units: Vec<usize> = (0..panel.n_units())
        .filter(|&i| panel.adoption_time(i).is_some())
        .collect();
    let mut observed = vec![0.0; panel.n_periods()];
    let mut counterfactual = vec![0.0; panel.n_periods()];
    for t in 0..panel.n_periods() {
        for &i in &treated_units {
            let y = panel.outcomes()[(i, t)];
            observed[t] += y;
            counterfactual[t] += if panel.is_treated(i, t) {
                let v = counterfactuals[(i, t)];
                if !v.is_finite() {
                    return Err(Error::MissingImputedCell { unit: i, period: t });
                }
                v
            } else {
                y
            };
        }
    }
    let w = window.unwrap_or(0);
    let obs_roll = trailing_mean(&observed, w);
    let cf_roll = trailing_mean(&counterfactual, w);
    Ok((0..panel.n_periods())
        .map(|t| SeriesRow {
            period: panel.period_labels()[t].clone(),
            observed: observed[t],
            counterfactual: counterfactual[t],
            observed_rolling: obs_roll[t],
            counterfactual_rolling: cf_roll[t],
        })
        .collect())
}

pub fn write_series(path: &Path, rows: &[SeriesRow], rolling: bool) -> Result<()> {
    let mut writer = csv::Writer::from_writer(create(path)?);
    let csv_err = |e: csv::Error| Error::Parse(e.to_string());
    let mut header = vec!["period", "observed", "counterfactual"];
    if rolling {
        header.extend(["observed_rolling", "counterfactual_rolling"]);
    }
    writer.write_record(&header).map_err(csv_err)?;
    for row in rows {
        let mut record = vec![row.period.clone(), fmt_f64(row.observed), fmt_f64(row.counterfactual)];
        if rolling {
            record.push(row.observed_rolling.map(fmt_f64).unwrap_or_default());
            record.push(row.counterfactual_rolling.map(fmt_f64).unwrap_or_default());
        }
        writer.write_record(&record).map_err(csv_err)?;
    }
    writer.flush()?;
    Ok(())
}

/// Writes the results table with one row per estimator.
pub fn write_results_csv<W: Write>(out: W, table: &ResultsTable) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Parse(e.to_string());
    writer
        .write_record([
            "estimator",
            "covariateRemoval",
            "factorKind",
            "covariateKind",
            "config",
            "R",
            "maeMean",
            "maeSe",
            "mseMean",
            "mseSe",
        ])
        .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    for row in &table.rows {
        writer
            .write_record([
                row.spec.estimator.name(),
                row.spec.removal.name(),
                table.dgp.factor.name(),
                table.dgp.covariate.name(),
                &table.dgp.name,
                &table.replications.to_string(),
                &fmt_f64(row.mae.mean),
                &opt(row.mae.se),
                &fmt_f64(row.mse.mean),
                &opt(row.mse.se),
            ])
            .map_err(csv_err)?;
    }
    writer.flush()?;
    Ok(())
}

/// Accuracy summary of one estimator in the JSON report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EstimatorSummary {
    pub estimator: String,
    pub covariate_removal: String,
    pub mae_mean: f64,
    pub mae_se: Option<f64>,
    pub mse_mean: f64,
    pub mse_se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct UnitAtt {
    pub unit: String,
    pub att: Option<f64>,
}

/// Structured run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Summary {
    /// Seconds since the Unix epoch; omitted for reproducible output.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<u64>,
    pub config: RunConfig,
    pub estimators: Vec<EstimatorSummary>,
    pub per_unit_att: Vec<UnitAtt>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overall_att: Option<f64>,
}

impl Summary {
    pub fn new(config: &RunConfig) -> Self {
        Self {
            generated_at: None,
            config: config.clone(),
            estimators: Vec::new(),
            per_unit_att: Vec::new(),
            overall_att: None,
        }
    }

    pub fn with_table(mut self, table: &ResultsTable) -> Self {
        self.estimators = table
            .rows
            .iter()
            .map(|row| EstimatorSummary {
                estimator: row.spec.estimator.name().to_string(),
                covariate_removal: row.spec.removal.name().to_string(),
                mae_mean: row.mae.mean,
                mae_se: row.mae.se,
                mse_mean: row.mse.mean,
                mse_se: row.mse.se,
            })
            .collect();
        self
    }

    pub fn with_metrics(mut self, spec: EstimatorSpec, metrics: Metrics) -> Self {
        self.estimators.push(EstimatorSummary {
            estimator: spec.estimator.name().to_string(),
            covariate_removal: spec.removal.name().to_string(),
            mae_mean: metrics.mae,
            mae_se: None,
            mse_mean: metrics.mse,
            mse_se: None,
        });
        self
    }

    pub fn with_att(mut self, panel: &PanelDataset, result: &ImputationResult) -> Self {
        self.per_unit_att = panel
            .unit_labels()
            .iter()
            .zip(&result.att.per_unit)
            .map(|(unit, &att)| UnitAtt {
                unit: unit.clone(),
                att,
            })
            .collect();
        self.overall_att = result.att.overall().ok();
        self
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Input file locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputPaths {
    pub y: PathBuf,
    pub w: PathBuf,
    pub x: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Simulate,
    Impute,
    Evaluate,
    ExportCounterfactual,
}

/// Everything a CLI run needs. Serialized as TOML with one section per
/// module configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub out: PathBuf,
    pub replications: usize,
    /// Estimator/covariate-removal pairs compared by `simulate`.
    pub estimators: Vec<EstimatorSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<InputPaths>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dgp: Option<DgpConfig>,
    pub estimator: EstimatorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Simulate,
            seed: 0,
            out: PathBuf::from("out"),
            replications: 1,
            estimators: vec![EstimatorSpec::new(
                crate::estimator::EstimatorKind::Codeal,
                crate::covariate::RemovalKind::Dnn,
            )],
            input: None,
            dgp: None,
            estimator: EstimatorConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Exactly one data source, and input files must exist.
    pub fn validate(&self) -> Result<()> {
        match (&self.input, &self.dgp) {
            (Some(_), Some(_)) => {
                return Err(Error::InvalidConfig(
                    "give either input paths or a data generating process, not both".into(),
                ))
            }
            (None, None) => {
                return Err(Error::InvalidConfig(
                    "no data source: give input paths or a data generating process".into(),
                ))
            }
            (Some(paths), None) => {
                for p in [&paths.y, &paths.w, &paths.x] {
                    if !p.is_file() {
                        return Err(Error::MissingFile(p.clone()));
                    }
                }
            }
            (None, Some(dgp)) => dgp.validate()?,
        }
        self.estimator.validate()
    }
}
