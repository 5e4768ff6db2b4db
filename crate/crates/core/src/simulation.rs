//! Synthetic panels with known counterfactuals, accuracy metrics and the
//! replicated experiment runner.
//!
//! Outcomes are generated as `Y = Y* + G + τ·1{W = 1} + E`, where `Y*` is a
//! latent factor effect, `G` a covariate effect, `τ` a unit-specific effect and
//! `E` Gaussian noise. Every random object is drawn from its own named
//! substream of the master seed, so switching e.g. the factor kind leaves the
//! covariates, treatment pattern, effects and noise untouched.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{run_estimator, EstimatorConfig, EstimatorKind};
use crate::covariate::RemovalKind;
use crate::panel::PanelDataset;
use crate::parallel;
use crate::seeds::substream;

/// Hidden width of the per-unit ReLU factor map.
const FACTOR_MLP_WIDTH: usize = 10;
/// Hidden width of the per-period ReLU covariate map.
const COVARIATE_MLP_WIDTH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Design {
    FourBlock,
    Staggered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FactorKind {
    Linear,
    Sine,
    Polynomial,
    ReluMlp,
}

impl FactorKind {
    pub fn name(self) -> &'static str {
        match self {
            FactorKind::Linear => "linear",
            FactorKind::Sine => "sine",
            FactorKind::Polynomial => "polynomial",
            FactorKind::ReluMlp => "relu-mlp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovariateKind {
    None,
    MatrixLinear,
    VectorLinear,
    Tanh,
    Poly,
    Log,
    Relu,
}

impl CovariateKind {
    pub fn name(self) -> &'static str {
        match self {
            CovariateKind::None => "none",
            CovariateKind::MatrixLinear => "matrix-linear",
            CovariateKind::VectorLinear => "vector-linear",
            CovariateKind::Tanh => "tanh",
            CovariateKind::Poly => "poly",
            CovariateKind::Log => "log",
            CovariateKind::Relu => "relu",
        }
    }
}

/// How often the factor-effect constants `C1`, `C2` are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstantScope {
    /// One pair per generated panel.
    Dataset,
    /// One pair per unit.
    Unit,
}

/// Data generating process settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpConfig {
    /// Label used in result tables.
    pub name: String,
    pub n_units: usize,
    pub n_periods: usize,
    /// Never-treated units in the four-block design.
    pub control_units: usize,
    /// Pre-treatment periods in the four-block design.
    pub pre_periods: usize,
    pub n_covariates: usize,
    pub n_factors: usize,
    pub design: Design,
    /// Number of adoption groups for the staggered design.
    pub groups: usize,
    pub factor: FactorKind,
    pub covariate: CovariateKind,
    pub noise_sd: f64,
    pub tau_mean: f64,
    /// Variance (not standard deviation) of the unit effects.
    pub tau_var: f64,
    pub constant_scope: ConstantScope,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self::config1()
    }
}

impl DgpConfig {
    /// Four-block, `(N, T, N1, T1, P, K) = (100, 200, 50, 100, 3, 4)`.
    pub fn config1() -> Self {
        Self {
            name: "config1".into(),
            n_units: 100,
            n_periods: 200,
            control_units: 50,
            pre_periods: 100,
            n_covariates: 3,
            n_factors: 4,
            design: Design::FourBlock,
            groups: 2,
            factor: FactorKind::Linear,
            covariate: CovariateKind::None,
            noise_sd: 0.5,
            tau_mean: 12.0,
            tau_var: 5.0,
            constant_scope: ConstantScope::Unit,
            seed: 0,
        }
    }

    /// Four-block, `(N, T, N1, T1, P, K) = (200, 120, 100, 60, 5, 3)`.
    pub fn config2() -> Self {
        Self {
            name: "config2".into(),
            n_units: 200,
            n_periods: 120,
            control_units: 100,
            pre_periods: 60,
            n_covariates: 5,
            n_factors: 3,
            ..Self::config1()
        }
    }

    /// Staggered, `(N, T, K) = (100, 120, 4)` with `r` groups.
    pub fn config3(r: usize) -> Self {
        Self {
            name: format!("config3-r{r}"),
            n_units: 100,
            n_periods: 120,
            n_factors: 4,
            design: Design::Staggered,
            groups: r,
            ..Self::config1()
        }
    }

    /// Staggered, `(N, T, K) = (200, 120, 3)` with `r` groups.
    pub fn config4(r: usize) -> Self {
        Self {
            name: format!("config4-r{r}"),
            n_units: 200,
            n_periods: 120,
            n_factors: 3,
            design: Design::Staggered,
            groups: r,
            ..Self::config1()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "config1" => Ok(Self::config1()),
            "config2" => Ok(Self::config2()),
            "config3-r5" => Ok(Self::config3(5)),
            "config3-r10" => Ok(Self::config3(10)),
            "config4-r5" => Ok(Self::config4(5)),
            "config4-r10" => Ok(Self::config4(10)),
            other => Err(Error::InvalidConfig(format!("unknown preset `{other}`"))),
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.n_units < 2 || self.n_periods < 2 {
            return bad("panel needs at least 2 units and 2 periods");
        }
        if self.n_factors == 0 {
            return bad("factor dimension must be at least 1");
        }
        if self.covariate != CovariateKind::None && self.n_covariates == 0 {
            return bad("covariate effects need at least one covariate");
        }
        if !(self.noise_sd >= 0.0) || !(self.tau_var >= 0.0) {
            return bad("noise sd and effect variance must be non-negative");
        }
        match self.design {
            Design::FourBlock => {
                if self.control_units == 0 || self.control_units >= self.n_units {
                    return bad("four-block design needs 0 < N1 < N");
                }
                if self.pre_periods == 0 || self.pre_periods >= self.n_periods {
                    return bad("four-block design needs 0 < T1 < T");
                }
            }
            Design::Staggered => {
                if self.groups < 2 {
                    return bad("staggered design needs r >= 2");
                }
                if self.groups > self.n_units || self.groups > self.n_periods {
                    return bad("r cannot exceed N or T");
                }
            }
        }
        Ok(())
    }

    /// Adoption period per unit (`None` = never treated), units already in
    /// sorted order.
    pub fn adoption_times(&self) -> Vec<Option<usize>> {
        match self.design {
            Design::FourBlock => (0..self.n_units)
                .map(|i| (i >= self.control_units).then_some(self.pre_periods))
                .collect(),
            Design::Staggered => {
                let r = self.groups;
                let sizes = equal_split(self.n_units, r);
                let lengths = equal_split(self.n_periods, r);
                let mut starts = vec![0; r];
                for eta in 1..r {
                    starts[eta] = starts[eta - 1] + lengths[eta - 1];
                }
                // group xi (1-based) adopts at the start of segment r + 2 - xi
                sizes
                    .iter()
                    .enumerate()
                    .flat_map(|(g, &size)| {
                        let xi = g + 1;
                        let adoption = (xi >= 2).then(|| starts[r + 1 - xi]);
                        std::iter::repeat_n(adoption, size)
                    })
                    .collect()
            }
        }
    }

    pub fn treatment(&self) -> DMatrix<bool> {
        let adoptions = self.adoption_times();
        DMatrix::from_fn(self.n_units, self.n_periods, |i, t| {
            adoptions[i].is_some_and(|a| t >= a)
        })
    }
}

/// Splits `total` into `parts` near-equal sizes, remainder to the first parts.
pub fn equal_split(total: usize, parts: usize) -> Vec<usize> {
    let base = total / parts;
    let extra = total % parts;
    (0..parts).map(|k| base + usize::from(k < extra)).collect()
}

/// Generated panel with every ground-truth component.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPanel {
    pub panel: PanelDataset,
    /// Latent factor effect `Y*`.
    pub factor_effect: DMatrix<f64>,
    /// Covariate effect `G`.
    pub covariate_effect: DMatrix<f64>,
    pub tau: DVector<f64>,
    pub noise: DMatrix<f64>,
}

impl SimulatedPanel {
    /// Untreated potential outcomes `Y(0) = Y* + G + E`.
    pub fn untreated_outcomes(&self) -> DMatrix<f64> {
        &self.factor_effect + &self.covariate_effect + &self.noise
    }
}

fn normal_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    // filled row by row so the draw order does not depend on storage layout
    let values: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    DMatrix::from_row_slice(rows, cols, &values)
}

fn scaled<R: Rng>(rng: &mut R, sd: f64) -> f64 {
    sd * rng.sample::<f64, _>(StandardNormal)
}

fn factor_effect(config: &DgpConfig, loadings: &DMatrix<f64>, factors: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, t, k) = (config.n_units, config.n_periods, config.n_factors);
    let mut consts = substream(config.seed, "factor-constants", 0);
    let draws = match config.constant_scope {
        ConstantScope::Dataset => 1,
        ConstantScope::Unit => n,
    };
    let pairs: Vec<(f64, f64)> = (0..draws)
        .map(|_| (StandardNormal.sample(&mut consts), StandardNormal.sample(&mut consts)))
        .collect();
    let c = |i: usize| pairs[i.min(draws - 1)];
    let inner = loadings * factors.transpose();
    match config.factor {
        FactorKind::Linear => DMatrix::from_fn(n, t, |i, s| 0.5 * c(i).0 * inner[(i, s)]),
        FactorKind::Sine => DMatrix::from_fn(n, t, |i, s| 2.0 * c(i).0 * inner[(i, s)].sin()),
        FactorKind::Polynomial => DMatrix::from_fn(n, t, |i, s| {
            let ff = factors.row(s).norm_squared();
            0.2 * c(i).0 * inner[(i, s)] + 0.2 * c(i).1 * ff
        }),
        FactorKind::ReluMlp => {
            let mut rng = substream(config.seed, "factor-weights", 0);
            let h = FACTOR_MLP_WIDTH;
            let mut out = DMatrix::zeros(n, t);
            for i in 0..n {
                let r1 = normal_matrix(h, k, &mut rng) * 0.5;
                let b1 = DVector::from_fn(h, |_, _| scaled(&mut rng, 0.5));
                let r2 = DVector::from_fn(h, |_, _| scaled(&mut rng, 0.5));
                let b2 = scaled(&mut rng, 0.5);
                for c in 0..t {
                    let f = factors.row(c).transpose();
                    let hidden = (&r1 * f + &b1).map(|v| v.max(0.0));
                    out[(i, c)] = r2.dot(&hidden) + b2;
                }
            }
            out
        }
    }
}

fn covariate_effect(config: &DgpConfig, x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, t, p) = (config.n_units, config.n_periods, config.n_covariates);
    let mut rng = substream(config.seed, "covariate-weights", 0);
    let mut per_period = |f: &mut dyn FnMut(&mut rand_chacha::ChaCha8Rng) -> Box<dyn Fn(&[f64]) -> f64>| {
        let mut g = DMatrix::zeros(n, t);
        for c in 0..t {
            let effect = f(&mut rng);
            for i in 0..n {
                let row: Vec<f64> = x.row(i).iter().copied().collect();
                g[(i, c)] = effect(&row);
            }
        }
        g
    };
    let linear_index = |rng: &mut rand_chacha::ChaCha8Rng| {
        let w: Vec<f64> = (0..p).map(|_| StandardNormal.sample(rng)).collect();
        let b: f64 = StandardNormal.sample(rng);
        (w, b)
    };
    match config.covariate {
        CovariateKind::None => DMatrix::zeros(n, t),
        CovariateKind::MatrixLinear => {
            let u = normal_matrix(p, t, &mut rng).add_scalar(1.0);
            x * u
        }
        CovariateKind::VectorLinear => {
            let u = DVector::from_fn(p, |_, _| 1.0 + scaled(&mut rng, 1.0));
            let xu = x * u;
            DMatrix::from_fn(n, t, |i, _| xu[i])
        }
        CovariateKind::Tanh => per_period(&mut |rng| {
            let (w, b) = linear_index(rng);
            Box::new(move |xi| dot(xi, &w).abs().tanh().sqrt() + b)
        }),
        CovariateKind::Poly => per_period(&mut |rng| {
            let (w, b) = linear_index(rng);
            Box::new(move |xi| dot(xi, &w).abs().sqrt() + b)
        }),
        CovariateKind::Log => per_period(&mut |rng| {
            let (w, b) = linear_index(rng);
            Box::new(move |xi| (dot(xi, &w) + b).abs().ln())
        }),
        CovariateKind::Relu => per_period(&mut |rng| {
            let h = COVARIATE_MLP_WIDTH;
            let r1 = normal_matrix(p, h, rng) * (2.0 / p as f64).sqrt();
            let b1 = DVector::from_fn(h, |_, _| scaled(rng, 1.0));
            let r2 = DVector::from_fn(h, |_, _| scaled(rng, (2.0 / h as f64).sqrt()));
            let b2 = scaled(rng, 1.0);
            Box::new(move |xi| {
                let row = DVector::from_column_slice(xi);
                let hidden = (r1.transpose() * row + &b1).map(|v| v.max(0.0));
                r2.dot(&hidden) + b2
            })
        }),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Draws a synthetic panel.
pub fn generate(config: &DgpConfig) -> Result<SimulatedPanel> {
    config.validate()?;
    let (n, t) = (config.n_units, config.n_periods);
    let x = normal_matrix(n, config.n_covariates, &mut substream(config.seed, "covariates", 0));
    let factors = normal_matrix(t, config.n_factors, &mut substream(config.seed, "factors", 0));
    let loadings = normal_matrix(n, config.n_factors, &mut substream(config.seed, "loadings", 0));
    let factor_effect = factor_effect(config, &loadings, &factors);
    let covariate_effect = covariate_effect(config, &x);

    let tau_dist = Normal::new(config.tau_mean, config.tau_var.sqrt())
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut tau_rng = substream(config.seed, "tau", 0);
    let tau = DVector::from_fn(n, |_, _| tau_dist.sample(&mut tau_rng));
    let noise = normal_matrix(n, t, &mut substream(config.seed, "noise", 0)) * config.noise_sd;

    let w = config.treatment();
    let y = DMatrix::from_fn(n, t, |i, c| {
        let effect = if w[(i, c)] { tau[i] } else { 0.0 };
        factor_effect[(i, c)] + covariate_effect[(i, c)] + effect + noise[(i, c)]
    });
    let panel = PanelDataset::new(y, w, x)?;
    Ok(SimulatedPanel {
        panel,
        factor_effect,
        covariate_effect,
        tau,
        noise,
    })
}

/// Imputation accuracy over treated cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub mse: f64,
}

/// MAE and MSE of `Y(1) - Ŷ(0) - τ*` over treated cells.
pub fn metrics(panel: &PanelDataset, tau: &DVector<f64>, imputed: &DMatrix<f64>) -> Result<Metrics> {
    if tau.len() != panel.n_units() || imputed.shape() != panel.outcomes().shape() {
        return Err(Error::ShapeMismatch("metrics inputs do not match the panel".into()));
    }
    let (mut abs, mut sq, mut count) = (0.0, 0.0, 0usize);
    for t in 0..panel.n_periods() {
        for i in 0..panel.n_units() {
            if panel.is_treated(i, t) {
                let y0 = imputed[(i, t)];
                if !y0.is_finite() {
                    return Err(Error::MissingImputedCell { unit: i, period: t });
                }
                let e = panel.outcomes()[(i, t)] - y0 - tau[i];
                abs += e.abs();
                sq += e * e;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::NoTreatedCells);
    }
    Ok(Metrics {
        mae: abs / count as f64,
        mse: sq / count as f64,
    })
}

/// One estimator entry of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSpec {
    pub estimator: EstimatorKind,
    pub removal: RemovalKind,
}

impl EstimatorSpec {
    pub fn new(estimator: EstimatorKind, removal: RemovalKind) -> Self {
        Self { estimator, removal }
    }
}

/// Mean and standard error of one metric across replications.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample sd / √R; absent with a single replication.
    pub se: Option<f64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let r = values.len() as f64;
        let mean = values.iter().sum::<f64>() / r;
        let se = (values.len() > 1).then(|| {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0);
            (var / r).sqrt()
        });
        Self { mean, se }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub spec: EstimatorSpec,
    pub mae: Summary,
    pub mse: Summary,
    /// Metrics of every replication, in replication order.
    pub replications: Vec<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub dgp: DgpConfig,
    pub replications: usize,
    pub rows: Vec<ResultRow>,
}

/// Settings for [`run_experiment`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dgp: DgpConfig,
    pub estimators: Vec<EstimatorSpec>,
    pub replications: usize,
    pub estimator: EstimatorConfig,
    /// Run replications concurrently.
    pub parallel: bool,
}

/// Generates `replications` panels (seed `dgp.seed + k`) and scores every
/// estimator on each.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ResultsTable> {
    if config.replications == 0 {
        return Err(Error::InvalidConfig("at least one replication is required".into()));
    }
    if config.estimators.is_empty() {
        return Err(Error::InvalidConfig("no estimators selected".into()));
    }
    config.dgp.validate()?;
    let reps: Vec<u64> = (0..config.replications as u64).collect();
    let per_rep = parallel::try_map(&reps, config.parallel, |&k| {
        let dgp = config.dgp.with_seed(config.dgp.seed.wrapping_add(k));
        let sim = generate(&dgp)?;
        config
            .estimators
            .iter()
            .map(|spec| {
                let est = EstimatorConfig {
                    kind: spec.estimator,
                    removal: spec.removal,
                    factors: config.dgp.n_factors,
                    seed: config.estimator.seed.wrapping_add(k),
                    ..config.estimator.clone()
                };
                let result = run_estimator(&sim.panel, &est)?;
                metrics(&sim.panel, &sim.tau, &result.counterfactuals)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let rows = config
        .estimators
        .iter()
        .enumerate()
        .map(|(e, &spec)| {
            let reps: Vec<Metrics> = per_rep.iter().map(|m| m[e]).collect();
            let maes: Vec<f64> = reps.iter().map(|m| m.mae).collect();
            let mses: Vec<f64> = reps.iter().map(|m| m.mse).collect();
            ResultRow {
                spec,
                mae: Summary::of(&maes),
                mse: Summary::of(&mses),
                replications: reps,
            }
        })
        .collect();
    Ok(ResultsTable {
        dgp: config.dgp.clone(),
        replications: config.replications,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{extract_block_partition, validate_and_sort};

    #[test]
    fn linear_noiseless_panel_is_pure_factor_plus_effect() {
        let config = DgpConfig {
            noise_sd: 0.0,
            constant_scope: ConstantScope::Dataset,
            n_units: 20,
            n_periods: 30,
            control_units: 10,
            pre_periods: 15,
            ..DgpConfig::config1()
        };
        let sim = generate(&config).unwrap();
        let y = sim.panel.outcomes();
        let mut consts = substream(config.seed, "factor-constants", 0);
        let c1: f64 = StandardNormal.sample(&mut consts);
        let lam = normal_matrix(20, 4, &mut substream(config.seed, "loadings", 0));
        let f = normal_matrix(30, 4, &mut substream(config.seed, "factors", 0));
        let expected = (&lam * f.transpose()) * (0.5 * c1);
        for i in 0..20 {
            for t in 0..30 {
                let tau = if sim.panel.is_treated(i, t) { sim.tau[i] } else { 0.0 };
                assert!((y[(i, t)] - tau - expected[(i, t)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unit_scope_draws_one_constant_per_unit() {
        let config = DgpConfig {
            noise_sd: 0.0,
            n_units: 6,
            n_periods: 8,
            control_units: 3,
            pre_periods: 4,
            ..DgpConfig::config1()
        };
        let sim = generate(&config).unwrap();
        let lam = normal_matrix(6, 4, &mut substream(config.seed, "loadings", 0));
        let f = normal_matrix(8, 4, &mut substream(config.seed, "factors", 0));
        let inner = &lam * f.transpose();
        let mut consts = substream(config.seed, "factor-constants", 0);
        for i in 0..6 {
            let c1: f64 = StandardNormal.sample(&mut consts);
            let _c2: f64 = StandardNormal.sample(&mut consts);
            for t in 0..8 {
                assert_eq!(sim.factor_effect[(i, t)], 0.5 * c1 * inner[(i, t)]);
            }
        }
    }

    #[test]
    fn config1_shape() {
        let sim = generate(&DgpConfig::config1()).unwrap();
        assert_eq!(sim.panel.outcomes().shape(), (100, 200));
        assert_eq!(sim.panel.n_covariates(), 3);
        let p = extract_block_partition(sim.panel.treatment()).unwrap();
        assert_eq!(p.group_sizes(), &[50, 50]);
        assert_eq!(p.segment_lengths(), &[100, 100]);
    }

    #[test]
    fn staggered_groups_are_equal() {
        let sim = generate(&DgpConfig::config3(5)).unwrap();
        let (sorted, order) = validate_and_sort(&sim.panel).unwrap();
        assert!(order.iter().enumerate().all(|(k, &i)| k == i));
        let p = extract_block_partition(sorted.treatment()).unwrap();
        assert_eq!(p.r(), 5);
        assert_eq!(p.group_sizes(), &[20; 5]);
        assert_eq!(p.segment_lengths(), &[24; 5]);
    }

    #[test]
    fn remainders_go_to_earliest_parts() {
        assert_eq!(equal_split(10, 3), vec![4, 3, 3]);
        let config = DgpConfig {
            n_units: 11,
            n_periods: 13,
            ..DgpConfig::config3(3)
        };
        let p = extract_block_partition(&config.treatment()).unwrap();
        assert_eq!(p.group_sizes(), &[4, 4, 3]);
        assert_eq!(p.segment_lengths(), &[5, 4, 4]);
    }

    #[test]
    fn decomposition_is_exact_for_every_kind() {
        let factors = [
            FactorKind::Linear,
            FactorKind::Sine,
            FactorKind::Polynomial,
            FactorKind::ReluMlp,
        ];
        let covariates = [
            CovariateKind::None,
            CovariateKind::MatrixLinear,
            CovariateKind::VectorLinear,
            CovariateKind::Tanh,
            CovariateKind::Poly,
            CovariateKind::Log,
            CovariateKind::Relu,
        ];
        for (k, &factor) in factors.iter().enumerate() {
            for &covariate in &covariates {
                let config = DgpConfig {
                    n_units: 12,
                    n_periods: 10,
                    control_units: 6,
                    pre_periods: 5,
                    factor,
                    covariate,
                    seed: k as u64,
                    ..DgpConfig::config1()
                };
                let sim = generate(&config).unwrap();
                let w = sim.panel.treatment();
                let tau_part = DMatrix::from_fn(12, 10, |i, t| if w[(i, t)] { sim.tau[i] } else { 0.0 });
                // summed in generation order the components rebuild Y bit for bit
                let rebuilt = &sim.factor_effect + &sim.covariate_effect + &tau_part + &sim.noise;
                assert_eq!(&rebuilt, sim.panel.outcomes(), "{factor:?}/{covariate:?}");
                let rest = sim.panel.outcomes()
                    - &sim.factor_effect
                    - &sim.covariate_effect
                    - tau_part
                    - &sim.noise;
                assert!(rest.amax() < 1e-12, "{factor:?}/{covariate:?}");
                assert!(sim.panel.outcomes().iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn generation_is_reproducible_and_substreams_are_isolated() {
        let base = DgpConfig {
            covariate: CovariateKind::Tanh,
            ..DgpConfig::config1()
        };
        assert_eq!(generate(&base).unwrap(), generate(&base).unwrap());
        let sine = generate(&DgpConfig {
            factor: FactorKind::Sine,
            ..base.clone()
        })
        .unwrap();
        let linear = generate(&base).unwrap();
        assert_eq!(sine.panel.covariates(), linear.panel.covariates());
        assert_eq!(sine.panel.treatment(), linear.panel.treatment());
        assert_eq!(sine.tau, linear.tau);
        assert_eq!(sine.noise, linear.noise);
        assert_eq!(sine.covariate_effect, linear.covariate_effect);
        assert_ne!(sine.factor_effect, linear.factor_effect);
    }

    #[test]
    fn tau_uses_variance() {
        let config = DgpConfig {
            n_units: 4000,
            n_periods: 2,
            control_units: 1,
            pre_periods: 1,
            ..DgpConfig::config1()
        };
        let sim = generate(&config).unwrap();
        let s = Summary::of(sim.tau.as_slice());
        let var = sim.tau.iter().map(|v| (v - s.mean).powi(2)).sum::<f64>() / 3999.0;
        assert!((s.mean - 12.0).abs() < 0.15);
        assert!((var - 5.0).abs() < 0.4, "variance {var}");
    }

    #[test]
    fn metric_arithmetic() {
        let w = DMatrix::from_row_slice(2, 2, &[false, false, false, true]);
        let y = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 5.0]);
        let panel = PanelDataset::new(y.clone(), w, DMatrix::zeros(2, 1)).unwrap();
        let mut y0 = y.clone();
        y0[(1, 1)] = 2.0;
        let tau = DVector::from_vec(vec![0.0, 12.0]);
        let m = metrics(&panel, &tau, &y0).unwrap();
        assert_eq!((m.mae, m.mse), (9.0, 81.0));

        y0[(1, 1)] = 5.0 - 12.0;
        assert_eq!(metrics(&panel, &tau, &y0).unwrap(), Metrics { mae: 0.0, mse: 0.0 });
    }

    #[test]
    fn oracle_imputation_scores_zero() {
        let sim = generate(&DgpConfig {
            factor: FactorKind::Sine,
            covariate: CovariateKind::Log,
            ..DgpConfig::config3(4)
        })
        .unwrap();
        let m = metrics(&sim.panel, &sim.tau, &sim.untreated_outcomes()).unwrap();
        assert!(m.mae < 1e-12 && m.mse < 1e-20);
    }

    #[test]
    fn metrics_match_cell_enumeration() {
        let sim = generate(&DgpConfig::config3(4)).unwrap();
        let imputed = sim.untreated_outcomes().map(|v| v + 0.3 * v.sin());
        let m = metrics(&sim.panel, &sim.tau, &imputed).unwrap();
        let mut cells = Vec::new();
        for (idx, &w) in sim.panel.treatment().iter().enumerate() {
            if w {
                let i = idx % sim.panel.n_units();
                cells.push(sim.panel.outcomes()[idx] - imputed[idx] - sim.tau[i]);
            }
        }
        let mae = cells.iter().map(|e| e.abs()).sum::<f64>() / cells.len() as f64;
        let mse = cells.iter().map(|e| e * e).sum::<f64>() / cells.len() as f64;
        assert!((m.mae - mae).abs() < 1e-12);
        assert!((m.mse - mse).abs() < 1e-12);
    }

    #[test]
    fn single_replication_has_no_standard_error() {
        assert_eq!(Summary::of(&[0.7]).se, None);
        let s = Summary::of(&[1.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.se.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = DgpConfig {
            control_units: 100,
            ..DgpConfig::config1()
        };
        assert!(matches!(generate(&bad), Err(Error::InvalidConfig(_))));
        let bad = DgpConfig {
            groups: 1,
            ..DgpConfig::config3(5)
        };
        assert!(matches!(generate(&bad), Err(Error::InvalidConfig(_))));
    }
}
