//! Removal of time-varying covariate effects `g_t(X_i)`.
//!
//! The deep variant fits one ReLU network per period on that period's
//! untreated units; the linear benchmark fits per-period least squares (all
//! units in periods where nobody is treated, controls otherwise). Either way the
//! adjusted panel is `Ỹ_it = Y_it - ĝ_t(X_i)` for every cell.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, DenseNet, TrainConfig};
use crate::panel::PanelDataset;
use crate::parallel;
use crate::seeds::derive_seed;

/// How covariate effects are estimated and removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RemovalKind {
    Dnn,
    Linear,
    None,
}

impl RemovalKind {
    pub fn name(self) -> &'static str {
        match self {
            RemovalKind::Dnn => "dnn",
            RemovalKind::Linear => "linear",
            RemovalKind::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dnn" | "nn" => Ok(RemovalKind::Dnn),
            "linear" | "lr" => Ok(RemovalKind::Linear),
            "none" => Ok(RemovalKind::None),
            other => Err(Error::InvalidConfig(format!("unknown covariate removal `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovariateConfig {
    /// Hidden widths of the per-period network.
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    /// One network for all periods with the period index as an extra input.
    pub shared_trunk: bool,
    /// Ridge penalty for the linear benchmark (intercept unpenalized).
    pub ridge: f64,
    pub parallel: bool,
}

impl Default for CovariateConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            train: TrainConfig {
                weight_decay: 10.0,
                ..TrainConfig::default()
            },
            shared_trunk: false,
            ridge: 0.0,
            parallel: false,
        }
    }
}

/// Per-column standardization of the covariate matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnScaler {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl ColumnScaler {
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let means: Vec<f64> = x.column_iter().map(|c| c.sum() / n).collect();
        let sds = x
            .column_iter()
            .zip(&means)
            .map(|(c, m)| {
                let var = c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { means, sds }
    }

    pub fn transform_row(&self, row: &[f64], out: &mut [f64]) {
        for (k, (o, &v)) in out.iter_mut().zip(row).enumerate() {
            *o = (v - self.means[k]) / self.sds[k];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub intercept: f64,
    pub coefficients: DVector<f64>,
}

/// Network plus the target standardization used while training it.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodNet {
    pub net: DenseNet,
    pub target_center: f64,
    pub target_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PeriodModels {
    None,
    Linear(Vec<LinearFit>),
    Dnn(Vec<PeriodNet>),
    /// One network over `[x, t / (T - 1)]`.
    Shared(PeriodNet),
}

/// Fitted per-period covariate effects `ĝ_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateModel {
    n_periods: usize,
    n_covariates: usize,
    scaler: Option<ColumnScaler>,
    models: PeriodModels,
}

impl CovariateModel {
    /// The identity adjustment.
    pub fn none(n_periods: usize, n_covariates: usize) -> Self {
        Self {
            n_periods,
            n_covariates,
            scaler: None,
            models: PeriodModels::None,
        }
    }

    pub fn kind(&self) -> RemovalKind {
        match self.models {
            PeriodModels::None => RemovalKind::None,
            PeriodModels::Linear(_) => RemovalKind::Linear,
            PeriodModels::Dnn(_) | PeriodModels::Shared(_) => RemovalKind::Dnn,
        }
    }

    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    pub fn models(&self) -> &PeriodModels {
        &self.models
    }

    /// `ĝ_t(x)` for one unit's raw covariate row.
    pub fn predict(&self, x: &[f64], period: usize) -> Result<f64> {
        if x.len() != self.n_covariates {
            return Err(Error::DimensionMismatch {
                expected: self.n_covariates,
                got: x.len(),
            });
        }
        if period >= self.n_periods {
            return Err(Error::ShapeMismatch(format!(
                "period {period} outside fitted range 0..{}",
                self.n_periods
            )));
        }
        let mut z = vec![0.0; x.len()];
        if let Some(s) = &self.scaler {
            s.transform_row(x, &mut z);
        }
        Ok(match &self.models {
            PeriodModels::None => 0.0,
            PeriodModels::Linear(fits) => {
                let f = &fits[period];
                f.intercept + f.coefficients.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
            }
            PeriodModels::Dnn(nets) => {
                let m = &nets[period];
                m.net.forward(&z)?[0] * m.target_scale + m.target_center
            }
            PeriodModels::Shared(m) => {
                z.push(period_position(period, self.n_periods));
                m.net.forward(&z)?[0] * m.target_scale + m.target_center
            }
        })
    }

    /// Predictions for every row of `x` at each of `periods`.
    pub fn predict_matrix(&self, x: &DMatrix<f64>, periods: &[usize]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(x.nrows(), periods.len());
        if let PeriodModels::None = self.models {
            if x.ncols() != self.n_covariates {
                return Err(Error::ShapeMismatch("covariate width differs from fit".into()));
            }
            return Ok(out);
        }
        let rows: Vec<Vec<f64>> = x.row_iter().map(|r| r.iter().copied().collect()).collect();
        for (c, &t) in periods.iter().enumerate() {
            for (i, row) in rows.iter().enumerate() {
                out[(i, c)] = self.predict(row, t)?;
            }
        }
        Ok(out)
    }
}

fn period_position(t: usize, n_periods: usize) -> f64 {
    if n_periods > 1 {
        t as f64 / (n_periods - 1) as f64
    } else {
        0.0
    }
}

fn control_units(panel: &PanelDataset, t: usize) -> Vec<usize> {
    (0..panel.n_units()).filter(|&i| !panel.is_treated(i, t)).collect()
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, if var > 0.0 { var.sqrt() } else { 1.0 })
}

/// Fits one network per period on that period's untreated units.
pub fn fit_covariates_dnn(panel: &PanelDataset, config: &CovariateConfig) -> Result<CovariateModel> {
    let n_periods = panel.n_periods();
    let p = panel.n_covariates();
    if p == 0 {
        return Err(Error::InvalidConfig("covariate network needs at least one covariate".into()));
    }
    let controls: Vec<Vec<usize>> = (0..n_periods).map(|t| control_units(panel, t)).collect();
    if let Some(t) = controls.iter().position(|c| c.is_empty()) {
        return Err(Error::NoControlUnits { period: t });
    }
    let scaler = ColumnScaler::fit(panel.covariates());
    let mut z = DMatrix::zeros(panel.n_units(), p);
    for i in 0..panel.n_units() {
        let row: Vec<f64> = panel.covariates().row(i).iter().copied().collect();
        let mut out = vec![0.0; p];
        scaler.transform_row(&row, &mut out);
        z.row_mut(i).copy_from_slice(&out);
    }
    let y = panel.outcomes();

    if config.shared_trunk {
        let dims = network_dims(p + 1, &config.hidden);
        let pairs: Vec<(usize, usize)> = (0..n_periods)
            .flat_map(|t| controls[t].iter().map(move |&i| (i, t)))
            .collect();
        let (center, scale) = mean_sd(pairs.iter().map(|&(i, t)| y[(i, t)]));
        let inputs = DMatrix::from_fn(pairs.len(), p + 1, |s, k| {
            let (i, t) = pairs[s];
            if k < p {
                z[(i, k)]
            } else {
                period_position(t, n_periods)
            }
        });
        let targets =
            DMatrix::from_fn(pairs.len(), 1, |s, _| (y[(pairs[s].0, pairs[s].1)] - center) / scale);
        let init = DenseNet::init(&dims, derive_seed(config.train.seed, "covariate-shared", 0))?;
        let (net, _) = nn::train(init, &inputs, &targets, &vec![true; pairs.len()], &config.train)?;
        return Ok(CovariateModel {
            n_periods,
            n_covariates: p,
            scaler: Some(scaler),
            models: PeriodModels::Shared(PeriodNet {
                net,
                target_center: center,
                target_scale: scale,
            }),
        });
    }

    let periods: Vec<usize> = (0..n_periods).collect();
    let dims = network_dims(p, &config.hidden);
    let nets = parallel::try_map(&periods, config.parallel, |&t| {
        let units = &controls[t];
        let (center, scale) = mean_sd(units.iter().map(|&i| y[(i, t)]));
        let inputs = DMatrix::from_fn(units.len(), p, |s, k| z[(units[s], k)]);
        let targets = DMatrix::from_fn(units.len(), 1, |s, _| (y[(units[s], t)] - center) / scale);
        let seed = derive_seed(config.train.seed, "covariate-period", t as u64);
        let init = DenseNet::init(&dims, seed)?;
        let train = config.train.with_seed(seed);
        let (net, _) = nn::train(init, &inputs, &targets, &vec![true; units.len()], &train)?;
        Ok::<_, Error>(PeriodNet {
            net,
            target_center: center,
            target_scale: scale,
        })
    })?;
    Ok(CovariateModel {
        n_periods,
        n_covariates: p,
        scaler: Some(scaler),
        models: PeriodModels::Dnn(nets),
    })
}

fn network_dims(inputs: usize, hidden: &[usize]) -> Vec<usize> {
    let mut dims = vec![inputs];
    dims.extend(hidden);
    dims.push(1);
    dims
}

/// Least squares of `y` on `[1, X]` with a ridge penalty on the slopes.
/// Rank deficiency is only an error when `ridge == 0`.
pub fn least_squares_with_intercept(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    ridge: f64,
) -> Result<LinearFit> {
    let n = x.nrows();
    let p = x.ncols();
    let design = DMatrix::from_fn(n, p + 1, |i, k| if k == 0 { 1.0 } else { x[(i, k - 1)] });
    if ridge == 0.0 {
        if n < p + 1 {
            return Err(Error::RankDeficientDesign);
        }
        let sv = design.clone().singular_values();
        let max = sv.max();
        let tol = (n.max(p + 1) as f64) * f64::EPSILON * max;
        if max == 0.0 || sv.iter().any(|&s| s <= tol) {
            return Err(Error::RankDeficientDesign);
        }
    }
    let mut gram = design.transpose() * &design;
    for k in 1..=p {
        gram[(k, k)] += ridge;
    }
    let rhs = design.transpose() * y;
    let chol = gram.cholesky().ok_or(Error::RankDeficientDesign)?;
    let beta = chol.solve(&rhs);
    Ok(LinearFit {
        intercept: beta[0],
        coefficients: beta.rows(1, p).into_owned(),
    })
}

/// Per-period least squares with intercept. Periods without treated units use
/// all units; other periods use controls only.
pub fn fit_covariates_linear(panel: &PanelDataset, ridge: f64) -> Result<CovariateModel> {
    if ridge < 0.0 {
        return Err(Error::InvalidConfig("ridge penalty must be non-negative".into()));
    }
    let p = panel.n_covariates();
    let fits = (0..panel.n_periods())
        .map(|t| {
            let units = control_units(panel, t);
            if units.is_empty() {
                return Err(Error::NoControlUnits { period: t });
            }
            let x = DMatrix::from_fn(units.len(), p, |s, k| panel.covariates()[(units[s], k)]);
            let y = DVector::from_fn(units.len(), |s, _| panel.outcomes()[(units[s], t)]);
            least_squares_with_intercept(&x, &y, ridge)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CovariateModel {
        n_periods: panel.n_periods(),
        n_covariates: p,
        scaler: None,
        models: PeriodModels::Linear(fits),
    })
}

/// Fits the requested kind of covariate model.
pub fn fit_covariates(
    panel: &PanelDataset,
    kind: RemovalKind,
    config: &CovariateConfig,
) -> Result<CovariateModel> {
    match kind {
        RemovalKind::Dnn => fit_covariates_dnn(panel, config),
        RemovalKind::Linear => fit_covariates_linear(panel, config.ridge),
        RemovalKind::None => Ok(CovariateModel::none(panel.n_periods(), panel.n_covariates())),
    }
}

/// Covariate-adjusted outcomes `Y - ĝ_t(X_i)` for every cell.
pub fn adjust(panel: &PanelDataset, model: &CovariateModel) -> Result<DMatrix<f64>> {
    if model.n_periods != panel.n_periods() || model.n_covariates != panel.n_covariates() {
        return Err(Error::ShapeMismatch(format!(
            "model fitted for {} periods and {} covariates, panel has {} and {}",
            model.n_periods,
            model.n_covariates,
            panel.n_periods(),
            panel.n_covariates()
        )));
    }
    let periods: Vec<usize> = (0..panel.n_periods()).collect();
    let g = model.predict_matrix(panel.covariates(), &periods)?;
    Ok(panel.outcomes() - g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
    }

    fn four_block(n: usize, t: usize, n1: usize, t1: usize) -> DMatrix<bool> {
        DMatrix::from_fn(n, t, |i, c| i >= n1 && c >= t1)
    }

    #[test]
    fn none_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let panel = PanelDataset::new(
            normal_matrix(5, 4, &mut rng),
            four_block(5, 4, 2, 2),
            normal_matrix(5, 2, &mut rng),
        )
        .unwrap();
        let model = fit_covariates(&panel, RemovalKind::None, &CovariateConfig::default()).unwrap();
        assert_eq!(&adjust(&panel, &model).unwrap(), panel.outcomes());
    }

    #[test]
    fn linear_model_is_interpolated_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = normal_matrix(40, 3, &mut rng);
        let u = DVector::from_vec(vec![1.5, -0.5, 2.0]);
        let xu = &x * &u;
        let y = DMatrix::from_fn(40, 6, |i, _| xu[i]);
        let panel = PanelDataset::new(y, four_block(40, 6, 20, 3), x).unwrap();
        let model = fit_covariates_linear(&panel, 0.0).unwrap();
        let PeriodModels::Linear(fits) = model.models() else { panic!() };
        for f in fits {
            assert!((&f.coefficients - &u).amax() < 1e-10);
            assert!(f.intercept.abs() < 1e-10);
        }
        assert!(adjust(&panel, &model).unwrap().amax() < 1e-10);
    }

    #[test]
    fn collinear_design_is_rank_deficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = normal_matrix(10, 1, &mut rng);
        let x = DMatrix::from_fn(10, 2, |i, k| a[i] * (k as f64 + 1.0));
        let y = normal_matrix(10, 3, &mut rng);
        let panel = PanelDataset::new(y, four_block(10, 3, 5, 1), x).unwrap();
        assert!(matches!(
            fit_covariates_linear(&panel, 0.0),
            Err(Error::RankDeficientDesign)
        ));
        assert!(fit_covariates_linear(&panel, 0.1).is_ok());
    }

    #[test]
    fn least_squares_matches_pseudo_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = normal_matrix(50, 3, &mut rng);
        let y = DVector::from_fn(50, |_, _| StandardNormal.sample(&mut rng));
        let fit = least_squares_with_intercept(&x, &y, 0.0).unwrap();
        let design = x.clone().insert_column(0, 1.0);
        let oracle = design.pseudo_inverse(1e-14).unwrap() * &y;
        assert!((fit.intercept - oracle[0]).abs() < 1e-8);
        for k in 0..3 {
            assert!((fit.coefficients[k] - oracle[k + 1]).abs() < 1e-8);
        }
    }

    #[test]
    fn adjustment_is_invertible() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let panel = PanelDataset::new(
            normal_matrix(30, 8, &mut rng),
            four_block(30, 8, 15, 4),
            normal_matrix(30, 2, &mut rng),
        )
        .unwrap();
        let model = fit_covariates_linear(&panel, 0.0).unwrap();
        let adjusted = adjust(&panel, &model).unwrap();
        let periods: Vec<usize> = (0..8).collect();
        let g = model.predict_matrix(panel.covariates(), &periods).unwrap();
        assert!((adjusted + g - panel.outcomes()).amax() < 1e-12);
    }

    #[test]
    fn post_periods_use_controls_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = normal_matrix(20, 1, &mut rng);
        let w = four_block(20, 4, 10, 2);
        // treated cells carry a huge offset that must not leak into the fit
        let y = DMatrix::from_fn(20, 4, |i, t| 2.0 * x[i] + if w[(i, t)] { 100.0 } else { 0.0 });
        let panel = PanelDataset::new(y, w, x).unwrap();
        let model = fit_covariates_linear(&panel, 0.0).unwrap();
        let PeriodModels::Linear(fits) = model.models() else { panic!() };
        for f in fits {
            assert!((f.coefficients[0] - 2.0).abs() < 1e-10);
        }
    }

    #[test]
    fn dnn_recovers_linear_effect() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (n, t) = (60, 4);
        let x = normal_matrix(n, 1, &mut rng);
        let y = DMatrix::from_fn(n, t, |i, _| 3.0 * x[i]);
        let panel = PanelDataset::new(y, four_block(n, t, 30, 2), x).unwrap();
        let config = CovariateConfig {
            train: TrainConfig {
                learning_rate: 1e-2,
                epochs: 500,
                ..TrainConfig::default()
            },
            ..CovariateConfig::default()
        };
        let model = fit_covariates_dnn(&panel, &config).unwrap();
        let adjusted = adjust(&panel, &model).unwrap();
        let mse = adjusted.iter().map(|v| v * v).sum::<f64>() / adjusted.len() as f64;
        assert!(mse < 1e-2, "mse {mse}");
    }

    #[test]
    fn shared_trunk_variant_fits() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (n, t) = (40, 5);
        let x = normal_matrix(n, 2, &mut rng);
        let y = DMatrix::from_fn(n, t, |i, c| x[(i, 0)] * (1.0 + c as f64 * 0.25));
        let panel = PanelDataset::new(y, four_block(n, t, 20, 2), x).unwrap();
        let config = CovariateConfig {
            shared_trunk: true,
            train: TrainConfig {
                learning_rate: 1e-2,
                epochs: 300,
                ..TrainConfig::default()
            },
            ..CovariateConfig::default()
        };
        let model = fit_covariates_dnn(&panel, &config).unwrap();
        assert!(matches!(model.models(), PeriodModels::Shared(_)));
        let adjusted = adjust(&panel, &model).unwrap();
        let before = panel.outcomes().iter().map(|v| v * v).sum::<f64>();
        let after = adjusted.iter().map(|v| v * v).sum::<f64>();
        assert!(after < 0.05 * before);
    }

    #[test]
    fn dnn_needs_controls_every_period() {
        let w = DMatrix::from_fn(3, 2, |_, t| t == 1);
        let panel = PanelDataset::new(DMatrix::zeros(3, 2), w, DMatrix::zeros(3, 1)).unwrap();
        assert!(matches!(
            fit_covariates_dnn(&panel, &CovariateConfig::default()),
            Err(Error::NoControlUnits { period: 1 })
        ));
    }

    #[test]
    fn adjust_rejects_mismatched_model() {
        let panel =
            PanelDataset::new(DMatrix::zeros(3, 2), four_block(3, 2, 1, 1), DMatrix::zeros(3, 1))
                .unwrap();
        let model = CovariateModel::none(5, 1);
        assert!(matches!(adjust(&panel, &model), Err(Error::ShapeMismatch(_))));
    }
}
