//! Four-block and staggered-adoption imputation pipelines, plus a uniform
//! facade over the deep estimator and the baselines.
//!
//! A staggered panel is handled by carving one four-block view per treated
//! block, imputing all of region D in that view and keeping only the target
//! block. Covariate effects are fitted once on the full panel and reused by
//! every subproblem.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{fit_multi_output_ae, fit_single_output_ae, AeConfig};
use crate::baselines::{did_impute, mc_nnm_impute_view, vertical_regression_impute, McNnmConfig};
use crate::covariate::{fit_covariates, CovariateConfig, CovariateModel, RemovalKind};
use crate::error::{Error, Result};
use crate::panel::{
    att_from_imputation, build_four_block, extract_block_partition, validate_and_sort,
    AttEstimate, FourBlockView, PanelDataset,
};
use crate::parallel;
use crate::seeds::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Codeal,
    SingleAe,
    Did,
    VertReg,
    McNnm,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 5] = [
        EstimatorKind::Codeal,
        EstimatorKind::SingleAe,
        EstimatorKind::Did,
        EstimatorKind::VertReg,
        EstimatorKind::McNnm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Codeal => "codeal",
            EstimatorKind::SingleAe => "single-ae",
            EstimatorKind::Did => "did",
            EstimatorKind::VertReg => "vert-reg",
            EstimatorKind::McNnm => "mc-nnm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownEstimator(s.to_string()))
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    pub removal: RemovalKind,
    /// Number of latent factors; used as the autoencoder code size.
    pub factors: usize,
    pub autoencoder: AeConfig,
    pub covariate: CovariateConfig,
    pub mc_nnm: McNnmConfig,
    /// Vertical-regression ridge penalty; chosen by leave-one-out when absent.
    pub vert_reg_ridge: Option<f64>,
    pub seed: u64,
    /// Solve the staggered subproblems concurrently.
    pub parallel: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            kind: EstimatorKind::Codeal,
            removal: RemovalKind::Dnn,
            factors: 4,
            autoencoder: AeConfig::default(),
            covariate: CovariateConfig::default(),
            mc_nnm: McNnmConfig::default(),
            vert_reg_ridge: None,
            seed: 0,
            parallel: false,
        }
    }
}

impl EstimatorConfig {
    pub fn new(kind: EstimatorKind, removal: RemovalKind, factors: usize) -> Self {
        Self {
            kind,
            removal,
            factors,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.factors == 0 {
            return Err(Error::InvalidConfig("number of factors must be at least 1".into()));
        }
        self.autoencoder.train.validate()?;
        if self.removal == RemovalKind::Dnn {
            self.covariate.train.validate()?;
        }
        Ok(())
    }
}

/// Where a counterfactual value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Observed,
    Imputed { xi: usize, eta: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubproblemDiagnostics {
    pub block: (usize, usize),
    pub k1: usize,
    pub k2: usize,
    /// Final training loss of the fitted model, when it has one.
    pub training_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputationResult {
    /// `Ŷ(0)`: observed outcomes on untreated cells, imputations elsewhere.
    pub counterfactuals: DMatrix<f64>,
    pub provenance: DMatrix<Provenance>,
    pub att: AttEstimate,
    pub diagnostics: Vec<SubproblemDiagnostics>,
}

impl ImputationResult {
    /// Same result with units reordered so that row `k` is row `order[k]`.
    pub fn permute_units(&self, order: &[usize]) -> Self {
        let t = self.counterfactuals.ncols();
        let n = order.len();
        Self {
            counterfactuals: DMatrix::from_fn(n, t, |i, c| self.counterfactuals[(order[i], c)]),
            provenance: DMatrix::from_fn(n, t, |i, c| self.provenance[(order[i], c)]),
            att: AttEstimate {
                per_unit: order.iter().map(|&i| self.att.per_unit[i]).collect(),
                treated_period_counts: order
                    .iter()
                    .map(|&i| self.att.treated_period_counts[i])
                    .collect(),
            },
            diagnostics: self.diagnostics.clone(),
        }
    }
}

/// Imputes region D of a four-block view with the estimator in `config`.
/// `covariates` must be fitted on the parent panel the view came from.
/// Returns the block and the training loss, if any.
pub fn impute_block(
    view: &FourBlockView,
    covariates: &CovariateModel,
    config: &EstimatorConfig,
    seed: u64,
) -> Result<(DMatrix<f64>, Option<f64>)> {
    let g = covariates.predict_matrix(&view.covariates, &view.origin_cols)?;
    let adjusted = &view.outcomes - &g;
    let (n1, t1) = (view.control_rows, view.pre_periods);
    let shape = (view.n_rows() - n1, view.n_cols() - t1);
    if shape.0 == 0 || shape.1 == 0 {
        return Err(Error::EmptyRegion("treated block"));
    }
    let ae_config = || {
        let mut c = config.autoencoder.with_bottleneck(config.factors);
        c.train.seed = seed;
        c
    };
    let region = |m: &DMatrix<f64>| m.view((n1, t1), shape).into_owned();
    let (block, loss) = match config.kind {
        EstimatorKind::Codeal => {
            let ae = fit_multi_output_ae(&adjusted, &view.indicator, &ae_config())?;
            let pred = ae.predict_matrix(&adjusted, &view.indicator)?;
            (region(&pred), ae.training_loss())
        }
        EstimatorKind::SingleAe => {
            let ae = fit_single_output_ae(&adjusted, &view.indicator, &ae_config())?;
            let pred = ae.predict_matrix(&adjusted, &view.indicator)?;
            (region(&pred), ae.training_loss())
        }
        EstimatorKind::Did => (did_impute(&view.with_outcomes(adjusted))?, None),
        EstimatorKind::VertReg => (
            vertical_regression_impute(&view.with_outcomes(adjusted), config.vert_reg_ridge)?,
            None,
        ),
        EstimatorKind::McNnm => {
            let mc = McNnmConfig {
                seed,
                ..config.mc_nnm.clone()
            };
            (mc_nnm_impute_view(&view.with_outcomes(adjusted), &mc)?, None)
        }
    };
    Ok((block + region(&g), loss))
}

/// Deep four-block imputation: covariate adjustment, multi-output
/// autoencoder fit on untreated cells, reconstruction of region D plus the
/// covariate effect.
pub fn impute_four_block(
    view: &FourBlockView,
    covariates: &CovariateModel,
    factors: usize,
    autoencoder: &AeConfig,
) -> Result<DMatrix<f64>> {
    let config = EstimatorConfig {
        kind: EstimatorKind::Codeal,
        factors,
        autoencoder: autoencoder.clone(),
        ..EstimatorConfig::default()
    };
    impute_block(view, covariates, &config, autoencoder.train.seed).map(|(block, _)| block)
}

fn subproblem_seed(master: u64, xi: usize, eta: usize) -> u64 {
    derive_seed(master, "subproblem", ((xi as u64) << 32) | eta as u64)
}

/// Staggered imputation of a panel already in sorted order.
///
/// Fits the covariate model once, starts `Ŷ(0)` from the observed untreated
/// outcomes and fills each treated block from its own four-block subproblem.
pub fn impute_staggered(panel: &PanelDataset, config: &EstimatorConfig) -> Result<ImputationResult> {
    config.validate()?;
    let invalid = |e: Error| Error::InvalidStaggeredPanel(Box::new(e));
    let (sorted, order) = validate_and_sort(panel).map_err(invalid)?;
    if order.iter().enumerate().any(|(k, &i)| k != i) {
        return Err(invalid(Error::UnsortedPanel));
    }
    let partition = extract_block_partition(sorted.treatment()).map_err(invalid)?;

    let covariate_config = CovariateConfig {
        train: config
            .covariate
            .train
            .with_seed(derive_seed(config.seed, "covariate", 0)),
        parallel: config.covariate.parallel || config.parallel,
        ..config.covariate.clone()
    };
    let covariates = fit_covariates(panel, config.removal, &covariate_config)?;

    let subproblems = partition.subproblems();
    let solved = parallel::try_map(&subproblems, config.parallel, |&(xi, eta)| {
        let context = |e: Error| Error::Subproblem {
            xi,
            eta,
            source: Box::new(e),
        };
        let view = build_four_block(panel, &partition, xi, eta).map_err(context)?;
        let seed = subproblem_seed(config.seed, xi, eta);
        let (block, loss) = impute_block(&view, &covariates, config, seed).map_err(context)?;
        Ok::<_, Error>((view, block, loss))
    })?;

    let mut counterfactuals = panel.outcomes().clone();
    let mut provenance = DMatrix::from_element(panel.n_units(), panel.n_periods(), Provenance::Observed);
    let mut diagnostics = Vec::with_capacity(solved.len());
    for (view, block, loss) in solved {
        let (xi, eta) = view.target_block;
        for i in view.target_rows.clone() {
            for t in view.target_cols.clone() {
                counterfactuals[(i, t)] = block[(i - view.control_rows, t - view.pre_periods)];
                provenance[(i, t)] = Provenance::Imputed { xi, eta };
            }
        }
        diagnostics.push(SubproblemDiagnostics {
            block: (xi, eta),
            k1: view.k1,
            k2: view.k2,
            training_loss: loss,
        });
    }
    let att = att_from_imputation(panel, &counterfactuals)?;
    Ok(ImputationResult {
        counterfactuals,
        provenance,
        att,
        diagnostics,
    })
}

/// Staggered deep imputation with the multi-output autoencoder.
pub fn codeal_staggered(panel: &PanelDataset, config: &EstimatorConfig) -> Result<ImputationResult> {
    impute_staggered(
        panel,
        &EstimatorConfig {
            kind: EstimatorKind::Codeal,
            ..config.clone()
        },
    )
}

/// Runs any estimator on a panel in arbitrary unit order. Units are sorted
/// internally and the result is returned in the input order.
pub fn run_estimator(panel: &PanelDataset, config: &EstimatorConfig) -> Result<ImputationResult> {
    let (sorted, order) =
        validate_and_sort(panel).map_err(|e| Error::InvalidStaggeredPanel(Box::new(e)))?;
    let result = impute_staggered(&sorted, config)?;
    let mut inverse = vec![0; order.len()];
    for (k, &i) in order.iter().enumerate() {
        inverse[i] = k;
    }
    Ok(result.permute_units(&inverse))
}
