//! Reference imputation estimators: difference-in-differences, vertical
//! regression and nuclear-norm matrix completion.

use nalgebra::{DMatrix, DVector, SVD};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::covariate::least_squares_with_intercept;
use crate::error::{Error, Result};
use crate::panel::FourBlockView;
use crate::seeds::substream;

fn region_mean(y: &DMatrix<f64>, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> f64 {
    let count = rows.len() * cols.len();
    let mut sum = 0.0;
    for t in cols {
        for i in rows.clone() {
            sum += y[(i, t)];
        }
    }
    sum / count as f64
}

fn check_regions(view: &FourBlockView) -> Result<()> {
    if view.control_rows == 0 {
        return Err(Error::EmptyRegion("control units"));
    }
    if view.pre_periods == 0 {
        return Err(Error::EmptyRegion("pre-treatment periods"));
    }
    if view.control_rows == view.n_rows() || view.pre_periods == view.n_cols() {
        return Err(Error::EmptyRegion("treated block"));
    }
    Ok(())
}

/// Two-way additive imputation of region D:
/// `Ŷ_it = mean_pre(Y_i) + mean_controls(Y_t) - mean(A)`.
pub fn did_impute(view: &FourBlockView) -> Result<DMatrix<f64>> {
    check_regions(view)?;
    let (n1, t1) = (view.control_rows, view.pre_periods);
    let (n, t) = (view.n_rows(), view.n_cols());
    let y = &view.outcomes;
    let grand = region_mean(y, 0..n1, 0..t1);
    let unit_pre: Vec<f64> = (n1..n).map(|i| region_mean(y, i..i + 1, 0..t1)).collect();
    let period_ctrl: Vec<f64> = (t1..t).map(|c| region_mean(y, 0..n1, c..c + 1)).collect();
    Ok(DMatrix::from_fn(n - n1, t - t1, |i, c| {
        unit_pre[i] + period_ctrl[c] - grand
    }))
}

/// Ridge path used when the vertical-regression penalty is not fixed.
fn ridge_grid(top_singular_sq: f64) -> Vec<f64> {
    let scale = top_singular_sq.max(f64::MIN_POSITIVE);
    (0..13).map(|k| scale * 10f64.powf(-6.0 + 0.5 * k as f64)).collect()
}

/// Ridge fit through the SVD of the centered design, with the penalty chosen
/// by leave-one-out error when `ridge` is `None`. Returns `(intercept, β)`.
fn ridge_loo(x: &DMatrix<f64>, y: &DVector<f64>, ridge: Option<f64>) -> (f64, DVector<f64>) {
    let n = x.nrows();
    let x_mean = DVector::from_fn(x.ncols(), |k, _| x.column(k).mean());
    let y_mean = y.mean();
    let xc = DMatrix::from_fn(n, x.ncols(), |i, k| x[(i, k)] - x_mean[k]);
    let yc = y.add_scalar(-y_mean);
    let svd = SVD::new(xc, true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let s = &svd.singular_values;
    let uty = u.transpose() * &yc;

    let lambda = ridge.unwrap_or_else(|| {
        let top = s.iter().fold(0.0f64, |m, &v| m.max(v));
        let mut best = (f64::INFINITY, 0.0);
        for lam in ridge_grid(top * top) {
            let shrink: Vec<f64> = s.iter().map(|&v| v * v / (v * v + lam)).collect();
            let mut loo = 0.0;
            for i in 0..n {
                let mut fitted = 0.0;
                let mut leverage = 1.0 / n as f64;
                for (k, &f) in shrink.iter().enumerate() {
                    fitted += u[(i, k)] * f * uty[k];
                    leverage += u[(i, k)] * u[(i, k)] * f;
                }
                let denom = (1.0 - leverage).max(1e-12);
                loo += ((yc[i] - fitted) / denom).powi(2);
            }
            if loo < best.0 {
                best = (loo, lam);
            }
        }
        best.1
    });

    let coef_rot = DVector::from_fn(s.len(), |k, _| {
        let d = s[k] * s[k] + lambda;
        if d > 0.0 { s[k] / d * uty[k] } else { 0.0 }
    });
    let beta = v_t.transpose() * coef_rot;
    let intercept = y_mean - x_mean.dot(&beta);
    (intercept, beta)
}

/// Regresses each treated unit's pre-period path on the control units'
/// paths and predicts its post-period outcomes.
///
/// `ridge = Some(0.0)` is ordinary least squares and fails on an
/// underdetermined design; `None` picks the penalty per unit by
/// leave-one-out error over the pre-periods.
pub fn vertical_regression_impute(view: &FourBlockView, ridge: Option<f64>) -> Result<DMatrix<f64>> {
    check_regions(view)?;
    let (n1, t1) = (view.control_rows, view.pre_periods);
    let (n, t) = (view.n_rows(), view.n_cols());
    if t1 < 2 {
        return Err(Error::InsufficientPrePeriods(t1));
    }
    if ridge.is_some_and(|r| !(r >= 0.0)) {
        return Err(Error::InvalidConfig("ridge penalty must be non-negative".into()));
    }
    let y = &view.outcomes;
    // rows are pre-periods, columns are control units
    let x_pre = DMatrix::from_fn(t1, n1, |c, j| y[(j, c)]);
    let x_post = DMatrix::from_fn(t - t1, n1, |c, j| y[(j, t1 + c)]);
    let mut out = DMatrix::zeros(n - n1, t - t1);
    for (row, i) in (n1..n).enumerate() {
        let target = DVector::from_fn(t1, |c, _| y[(i, c)]);
        let (intercept, beta) = match ridge {
            Some(r) if r == 0.0 => {
                let fit = least_squares_with_intercept(&x_pre, &target, 0.0)?;
                (fit.intercept, fit.coefficients)
            }
            other => ridge_loo(&x_pre, &target, other),
        };
        let pred = (&x_post * beta).add_scalar(intercept);
        out.row_mut(row).copy_from(&pred.transpose());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McNnmConfig {
    /// Fixed penalty; selected on a validation holdout when absent.
    pub lambda: Option<f64>,
    pub grid_size: usize,
    pub grid_low: f64,
    pub grid_high: f64,
    /// Share of observed cells held out for penalty selection.
    pub holdout: f64,
    pub fixed_effects: bool,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for McNnmConfig {
    fn default() -> Self {
        Self {
            lambda: None,
            grid_size: 10,
            grid_low: 1e-4,
            grid_high: 0.5,
            holdout: 0.1,
            fixed_effects: true,
            tol: 1e-5,
            max_iter: 500,
            seed: 0,
        }
    }
}

/// Iterate of the soft-impute solver.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftImputeState {
    pub low_rank: DMatrix<f64>,
    pub row_effects: DVector<f64>,
    pub col_effects: DVector<f64>,
    pub lambda: f64,
    pub iterations: usize,
    pub relative_change: f64,
}

impl SoftImputeState {
    /// `L + row + col` for every cell.
    pub fn fitted(&self) -> DMatrix<f64> {
        let (n, t) = self.low_rank.shape();
        DMatrix::from_fn(n, t, |i, c| {
            self.low_rank[(i, c)] + self.row_effects[i] + self.col_effects[c]
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McNnmFit {
    pub state: SoftImputeState,
    /// Objective after every iteration.
    pub objective: Vec<f64>,
    pub converged: bool,
    /// Validation MSE per grid penalty, empty for a fixed penalty.
    pub validation: Vec<(f64, f64)>,
}

impl McNnmFit {
    /// Observed outcomes where `observed`, fitted values elsewhere.
    pub fn imputed(&self, y: &DMatrix<f64>, observed: &DMatrix<bool>) -> DMatrix<f64> {
        let fitted = self.state.fitted();
        DMatrix::from_fn(y.nrows(), y.ncols(), |i, t| {
            if observed[(i, t)] { y[(i, t)] } else { fitted[(i, t)] }
        })
    }
}

/// Soft-thresholds the singular values of `z` by `lambda`. Returns the
/// thresholded matrix and its nuclear norm.
pub fn singular_value_threshold(z: DMatrix<f64>, lambda: f64) -> (DMatrix<f64>, f64) {
    let mut svd = SVD::new(z, true, true);
    let mut nuclear = 0.0;
    for s in svd.singular_values.iter_mut() {
        *s = (*s - lambda).max(0.0);
        nuclear += *s;
    }
    let l = svd.recompose().expect("both factors computed");
    (l, nuclear)
}

fn objective(
    y: &DMatrix<f64>,
    observed: &DMatrix<bool>,
    state: &SoftImputeState,
    nuclear: f64,
) -> f64 {
    let mut sse = 0.0;
    for t in 0..y.ncols() {
        for i in 0..y.nrows() {
            if observed[(i, t)] {
                let r = y[(i, t)]
                    - state.low_rank[(i, t)]
                    - state.row_effects[i]
                    - state.col_effects[t];
                sse += r * r;
            }
        }
    }
    0.5 * sse + state.lambda * nuclear
}

fn update_fixed_effects(y: &DMatrix<f64>, observed: &DMatrix<bool>, state: &mut SoftImputeState) {
    let (n, t) = y.shape();
    for i in 0..n {
        let (mut sum, mut count) = (0.0, 0usize);
        for c in 0..t {
            if observed[(i, c)] {
                sum += y[(i, c)] - state.low_rank[(i, c)] - state.col_effects[c];
                count += 1;
            }
        }
        state.row_effects[i] = if count > 0 { sum / count as f64 } else { 0.0 };
    }
    for c in 0..t {
        let (mut sum, mut count) = (0.0, 0usize);
        for i in 0..n {
            if observed[(i, c)] {
                sum += y[(i, c)] - state.low_rank[(i, c)] - state.row_effects[i];
                count += 1;
            }
        }
        state.col_effects[c] = if count > 0 { sum / count as f64 } else { 0.0 };
    }
}

/// Soft-impute with optional two-way fixed effects for a fixed penalty.
///
/// Minimizes `½ Σ_obs (Y - L - a_i - b_t)² + λ‖L‖_*` by alternating exact
/// fixed-effect updates with a singular-value-thresholding step on the
/// observed-filled residual. Each step does not increase the objective. On
/// hitting `max_iter` the best iterate is returned with `converged = false`.
pub fn soft_impute(
    y: &DMatrix<f64>,
    observed: &DMatrix<bool>,
    lambda: f64,
    fixed_effects: bool,
    tol: f64,
    max_iter: usize,
) -> Result<McNnmFit> {
    soft_impute_from(y, observed, lambda, fixed_effects, tol, max_iter, None)
}

/// [`soft_impute`] started from a previous iterate (its penalty is ignored).
pub fn soft_impute_from(
    y: &DMatrix<f64>,
    observed: &DMatrix<bool>,
    lambda: f64,
    fixed_effects: bool,
    tol: f64,
    max_iter: usize,
    start: Option<&SoftImputeState>,
) -> Result<McNnmFit> {
    if y.shape() != observed.shape() {
        return Err(Error::ShapeMismatch("outcomes and mask differ in shape".into()));
    }
    if !observed.iter().any(|&o| o) {
        return Err(Error::NoObservedCells);
    }
    if !(tol > 0.0) || !(lambda >= 0.0) {
        return Err(Error::InvalidConfig("soft-impute needs tol > 0 and lambda >= 0".into()));
    }
    let (n, t) = y.shape();
    let mut state = match start {
        Some(s) if s.low_rank.shape() == (n, t) => SoftImputeState {
            lambda,
            iterations: 0,
            relative_change: f64::INFINITY,
            ..s.clone()
        },
        Some(_) => return Err(Error::ShapeMismatch("warm start differs in shape".into())),
        None => SoftImputeState {
            low_rank: DMatrix::zeros(n, t),
            row_effects: DVector::zeros(n),
            col_effects: DVector::zeros(t),
            lambda,
            iterations: 0,
            relative_change: f64::INFINITY,
        },
    };
    let mut trace = Vec::with_capacity(max_iter.min(4096));
    let mut best: Option<(f64, SoftImputeState)> = None;
    let mut converged = false;
    for iter in 1..=max_iter {
        if fixed_effects {
            update_fixed_effects(y, observed, &mut state);
        }
        let filled = DMatrix::from_fn(n, t, |i, c| {
            if observed[(i, c)] {
                y[(i, c)] - state.row_effects[i] - state.col_effects[c]
            } else {
                state.low_rank[(i, c)]
            }
        });
        let (next, nuclear) = singular_value_threshold(filled, lambda);
        let change = (&next - &state.low_rank).norm();
        let scale = state.low_rank.norm().max(next.norm()).max(f64::MIN_POSITIVE);
        state.low_rank = next;
        state.iterations = iter;
        state.relative_change = change / scale;
        let obj = objective(y, observed, &state, nuclear);
        trace.push(obj);
        if best.as_ref().is_none_or(|(b, _)| obj <= *b) {
            best = Some((obj, state.clone()));
        }
        if state.relative_change < tol {
            converged = true;
            break;
        }
    }
    let state = match (converged, best) {
        (false, Some((_, b))) => b,
        _ => state,
    };
    Ok(McNnmFit {
        state,
        objective: trace,
        converged,
        validation: Vec::new(),
    })
}

/// Largest singular value of the observed entries (zeros elsewhere).
fn observed_spectral_norm(y: &DMatrix<f64>, observed: &DMatrix<bool>, fixed_effects: bool) -> f64 {
    let mut z = y.zip_map(observed, |v, o| if o { v } else { 0.0 });
    if fixed_effects {
        let mut state = SoftImputeState {
            low_rank: DMatrix::zeros(y.nrows(), y.ncols()),
            row_effects: DVector::zeros(y.nrows()),
            col_effects: DVector::zeros(y.ncols()),
            lambda: 0.0,
            iterations: 0,
            relative_change: 0.0,
        };
        update_fixed_effects(y, observed, &mut state);
        z = DMatrix::from_fn(y.nrows(), y.ncols(), |i, c| {
            if observed[(i, c)] {
                y[(i, c)] - state.row_effects[i] - state.col_effects[c]
            } else {
                0.0
            }
        });
    }
    z.singular_values().iter().fold(0.0, |m, &s| m.max(s))
}

/// Penalty grid: `grid_size` log-spaced multiples of the top singular value.
pub fn lambda_grid(sigma_max: f64, config: &McNnmConfig) -> Vec<f64> {
    let k = config.grid_size.max(1);
    let (lo, hi) = (config.grid_low.ln(), config.grid_high.ln());
    (0..k)
        .map(|j| {
            let frac = if k == 1 { 1.0 } else { j as f64 / (k - 1) as f64 };
            sigma_max * (hi + (lo - hi) * frac).exp()
        })
        .collect()
}

/// Nuclear-norm completion of the cells where `treated` is set.
pub fn mc_nnm_impute(y: &DMatrix<f64>, treated: &DMatrix<bool>, config: &McNnmConfig) -> Result<McNnmFit> {
    if y.shape() != treated.shape() {
        return Err(Error::ShapeMismatch("outcomes and indicator differ in shape".into()));
    }
    let observed = treated.map(|w| !w);
    let observed_cells: Vec<(usize, usize)> = (0..y.ncols())
        .flat_map(|t| (0..y.nrows()).map(move |i| (i, t)))
        .filter(|&(i, t)| observed[(i, t)])
        .collect();
    if observed_cells.is_empty() {
        return Err(Error::NoObservedCells);
    }
    if let Some(lambda) = config.lambda {
        return soft_impute(y, &observed, lambda, config.fixed_effects, config.tol, config.max_iter);
    }

    let mut shuffled = observed_cells.clone();
    shuffled.shuffle(&mut substream(config.seed, "mc-nnm-holdout", 0));
    let n_hold = ((shuffled.len() as f64 * config.holdout).round() as usize).min(shuffled.len() - 1);
    let held = &shuffled[..n_hold];
    let mut train_mask = observed.clone();
    for &(i, t) in held {
        train_mask[(i, t)] = false;
    }
    let sigma = observed_spectral_norm(y, &observed, config.fixed_effects);
    let grid = lambda_grid(sigma, config);
    let (scores, _) = penalty_path(y, &train_mask, &grid, config, |state| {
        if held.is_empty() {
            return 0.0;
        }
        let fitted = state.fitted();
        let sse: f64 = held.iter().map(|&(i, t)| (y[(i, t)] - fitted[(i, t)]).powi(2)).sum();
        sse / held.len() as f64
    })?;
    let best = scores
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (k, &s)| if s < acc.1 { (k, s) } else { acc })
        .0;
    // refit on all observed cells along the same path so the chosen penalty
    // gets the same warm start it was validated with
    let (_, mut result) = penalty_path(y, &observed, &grid[..=best], config, |_| 0.0)?;
    result.validation = grid.into_iter().zip(scores).collect();
    Ok(result)
}

/// Solves along a decreasing penalty path, warm-starting each fit from the
/// previous one. Returns `score(state)` for every penalty and the last fit.
fn penalty_path(
    y: &DMatrix<f64>,
    observed: &DMatrix<bool>,
    grid: &[f64],
    config: &McNnmConfig,
    score: impl Fn(&SoftImputeState) -> f64,
) -> Result<(Vec<f64>, McNnmFit)> {
    let mut scores = Vec::with_capacity(grid.len());
    let mut last: Option<McNnmFit> = None;
    for &lambda in grid {
        let start = last.as_ref().map(|f| &f.state);
        let fit = soft_impute_from(
            y,
            observed,
            lambda,
            config.fixed_effects,
            config.tol,
            config.max_iter,
            start,
        )?;
        scores.push(score(&fit.state));
        last = Some(fit);
    }
    Ok((scores, last.ok_or(Error::InvalidConfig("empty penalty grid".into()))?))
}

/// MC-NNM restricted to region D of a four-block view.
pub fn mc_nnm_impute_view(view: &FourBlockView, config: &McNnmConfig) -> Result<DMatrix<f64>> {
    check_regions(view)?;
    let fit = mc_nnm_impute(&view.outcomes, &view.indicator, config)?;
    let fitted = fit.state.fitted();
    let (n1, t1) = (view.control_rows, view.pre_periods);
    Ok(fitted
        .view((n1, t1), (view.n_rows() - n1, view.n_cols() - t1))
        .into_owned())
}
