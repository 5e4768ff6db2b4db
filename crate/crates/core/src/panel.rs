//! Panel data model and staggered-adoption geometry.
//!
//! A panel holds outcomes `Y` (units × periods), a binary treatment matrix `W`
//! of the same shape and static unit covariates `X` (units × features). Under a
//! staggered adoption design, sorting units so never-treated units come first
//! followed by progressively earlier adopters turns `W` into an `r × r` grid of
//! constant blocks. Block `(ξ, η)` (1-based group and segment indices) is
//! treated exactly when `ξ + η > r + 1`.
//!
//! Any treated block can be imputed by carving a four-block sub-panel out of
//! the grid, see [`build_four_block`].

use std::collections::BTreeSet;
use std::ops::Range;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Observed panel: outcomes, treatment indicators and unit covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    outcomes: DMatrix<f64>,
    treatment: DMatrix<bool>,
    covariates: DMatrix<f64>,
    unit_labels: Vec<String>,
    period_labels: Vec<String>,
}

impl PanelDataset {
    /// Builds a panel with generated labels (`unit0..`, `t0..`).
    pub fn new(
        outcomes: DMatrix<f64>,
        treatment: DMatrix<bool>,
        covariates: DMatrix<f64>,
    ) -> Result<Self> {
        let unit_labels = (0..outcomes.nrows()).map(|i| format!("unit{i}")).collect();
        let period_labels = (0..outcomes.ncols()).map(|t| format!("t{t}")).collect();
        Self::with_labels(outcomes, treatment, covariates, unit_labels, period_labels)
    }

    pub fn with_labels(
        outcomes: DMatrix<f64>,
        treatment: DMatrix<bool>,
        covariates: DMatrix<f64>,
        unit_labels: Vec<String>,
        period_labels: Vec<String>,
    ) -> Result<Self> {
        if outcomes.shape() != treatment.shape() {
            return Err(Error::ShapeMismatch(format!(
                "outcomes are {:?} but treatment is {:?}",
                outcomes.shape(),
                treatment.shape()
            )));
        }
        if covariates.nrows() != outcomes.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "covariates have {} rows, panel has {} units",
                covariates.nrows(),
                outcomes.nrows()
            )));
        }
        if unit_labels.len() != outcomes.nrows() || period_labels.len() != outcomes.ncols() {
            return Err(Error::ShapeMismatch("label count does not match panel".into()));
        }
        Ok(Self {
            outcomes,
            treatment,
            covariates,
            unit_labels,
            period_labels,
        })
    }

    /// Builds a panel from a numeric treatment matrix, rejecting anything but 0/1.
    pub fn from_numeric_treatment(
        outcomes: DMatrix<f64>,
        treatment: &DMatrix<f64>,
        covariates: DMatrix<f64>,
    ) -> Result<Self> {
        let w = indicator_from_numeric(treatment)?;
        Self::new(outcomes, w, covariates)
    }

    pub fn outcomes(&self) -> &DMatrix<f64> {
        &self.outcomes
    }

    pub fn treatment(&self) -> &DMatrix<bool> {
        &self.treatment
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn unit_labels(&self) -> &[String] {
        &self.unit_labels
    }

    pub fn period_labels(&self) -> &[String] {
        &self.period_labels
    }

    pub fn n_units(&self) -> usize {
        self.outcomes.nrows()
    }

    pub fn n_periods(&self) -> usize {
        self.outcomes.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn is_treated(&self, unit: usize, period: usize) -> bool {
        self.treatment[(unit, period)]
    }

    /// First treated period of `unit`, `None` if never treated.
    pub fn adoption_time(&self, unit: usize) -> Option<usize> {
        adoption_time(&self.treatment, unit)
    }

    pub fn treated_cell_count(&self) -> usize {
        self.treatment.iter().filter(|&&w| w).count()
    }

    /// Returns the same panel with units reordered so that row `k` of the
    /// result is row `order[k]` of `self`.
    pub fn permute_units(&self, order: &[usize]) -> Self {
        let n = self.n_units();
        assert_eq!(order.len(), n, "permutation length");
        let outcomes = DMatrix::from_fn(n, self.n_periods(), |i, t| self.outcomes[(order[i], t)]);
        let treatment =
            DMatrix::from_fn(n, self.n_periods(), |i, t| self.treatment[(order[i], t)]);
        let covariates =
            DMatrix::from_fn(n, self.n_covariates(), |i, p| self.covariates[(order[i], p)]);
        let unit_labels = order.iter().map(|&i| self.unit_labels[i].clone()).collect();
        Self {
            outcomes,
            treatment,
            covariates,
            unit_labels,
            period_labels: self.period_labels.clone(),
        }
    }

    /// Replaces the outcome matrix, keeping everything else.
    pub fn with_outcomes(&self, outcomes: DMatrix<f64>) -> Result<Self> {
        Self::with_labels(
            outcomes,
            self.treatment.clone(),
            self.covariates.clone(),
            self.unit_labels.clone(),
            self.period_labels.clone(),
        )
    }
}

pub fn indicator_from_numeric(w: &DMatrix<f64>) -> Result<DMatrix<bool>> {
    for i in 0..w.nrows() {
        for t in 0..w.ncols() {
            let v = w[(i, t)];
            if v != 0.0 && v != 1.0 {
                return Err(Error::NonBinaryIndicator { unit: i, period: t });
            }
        }
    }
    Ok(w.map(|v| v == 1.0))
}

pub fn adoption_time(w: &DMatrix<bool>, unit: usize) -> Option<usize> {
    (0..w.ncols()).find(|&t| w[(unit, t)])
}

/// Sort key: never-treated first, then descending adoption time.
fn adoption_key(w: &DMatrix<bool>, unit: usize) -> usize {
    adoption_time(w, unit).unwrap_or(usize::MAX)
}

fn check_irreversible(w: &DMatrix<bool>) -> Result<()> {
    for i in 0..w.nrows() {
        for t in 1..w.ncols() {
            if w[(i, t - 1)] && !w[(i, t)] {
                return Err(Error::ReversedTreatment { unit: i, period: t });
            }
        }
    }
    Ok(())
}

/// Checks staggered validity and reorders units: never-treated first, then
/// adopters by descending adoption time. Ties keep their original order.
///
/// Returns the sorted panel and the permutation mapping sorted index to
/// original index.
pub fn validate_and_sort(panel: &PanelDataset) -> Result<(PanelDataset, Vec<usize>)> {
    let w = panel.treatment();
    check_irreversible(w)?;
    if !(0..panel.n_units()).any(|i| panel.adoption_time(i).is_none()) {
        return Err(Error::NoNeverTreatedUnit);
    }
    if let Some(unit) = (0..panel.n_units()).find(|&i| panel.adoption_time(i) == Some(0)) {
        return Err(Error::NoPreTreatmentPeriod { unit });
    }
    let mut order: Vec<usize> = (0..panel.n_units()).collect();
    // stable: ties keep original order
    order.sort_by_key(|&i| std::cmp::Reverse(adoption_key(w, i)));
    Ok((panel.permute_units(&order), order))
}

/// True when rows are in the order produced by [`validate_and_sort`].
pub fn is_sorted(w: &DMatrix<bool>) -> bool {
    (1..w.nrows()).all(|i| adoption_key(w, i - 1) >= adoption_key(w, i))
}

/// Staggered block grid. Group and segment indices are 1-based throughout,
/// so block `(xi, eta)` covers rows of group `xi` and columns of segment `eta`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    group_sizes: Vec<usize>,
    segment_lengths: Vec<usize>,
    treated_blocks: BTreeSet<(usize, usize)>,
}

impl BlockPartition {
    /// Number of groups (equal to the number of segments).
    pub fn r(&self) -> usize {
        self.group_sizes.len()
    }

    pub fn group_sizes(&self) -> &[usize] {
        &self.group_sizes
    }

    pub fn segment_lengths(&self) -> &[usize] {
        &self.segment_lengths
    }

    pub fn treated_blocks(&self) -> &BTreeSet<(usize, usize)> {
        &self.treated_blocks
    }

    pub fn is_treated(&self, xi: usize, eta: usize) -> bool {
        self.treated_blocks.contains(&(xi, eta))
    }

    /// Row range of group `xi` (1-based).
    pub fn group_rows(&self, xi: usize) -> Range<usize> {
        let start: usize = self.group_sizes[..xi - 1].iter().sum();
        start..start + self.group_sizes[xi - 1]
    }

    /// Column range of segment `eta` (1-based).
    pub fn segment_cols(&self, eta: usize) -> Range<usize> {
        let start: usize = self.segment_lengths[..eta - 1].iter().sum();
        start..start + self.segment_lengths[eta - 1]
    }

    /// Rows spanned by groups `from..=to`.
    pub fn groups_rows(&self, from: usize, to: usize) -> Range<usize> {
        self.group_rows(from).start..self.group_rows(to).end
    }

    /// Columns spanned by segments `from..=to`.
    pub fn segments_cols(&self, from: usize, to: usize) -> Range<usize> {
        self.segment_cols(from).start..self.segment_cols(to).end
    }

    /// Rebuilds the indicator matrix the partition describes.
    pub fn reconstruct(&self) -> DMatrix<bool> {
        let n = self.group_sizes.iter().sum();
        let t = self.segment_lengths.iter().sum();
        let mut w = DMatrix::from_element(n, t, false);
        for &(xi, eta) in &self.treated_blocks {
            for i in self.group_rows(xi) {
                for c in self.segment_cols(eta) {
                    w[(i, c)] = true;
                }
            }
        }
        w
    }

    /// Treated blocks in the order visited by the staggered imputation loop:
    /// `xi = 2..=r`, `eta = r+2-xi..=r`.
    pub fn subproblems(&self) -> Vec<(usize, usize)> {
        let r = self.r();
        let mut out = Vec::new();
        for xi in 2..=r {
            for eta in (r + 2 - xi)..=r {
                if self.is_treated(xi, eta) {
                    out.push((xi, eta));
                }
            }
        }
        out
    }
}

/// Extracts the maximal block grid of a sorted staggered indicator matrix.
///
/// Groups break wherever the adoption time changes between consecutive rows;
/// segments break at every distinct adoption time.
pub fn extract_block_partition(w: &DMatrix<bool>) -> Result<BlockPartition> {
    check_irreversible(w)?;
    if !is_sorted(w) {
        return Err(Error::UnsortedPanel);
    }
    let n = w.nrows();
    let t_total = w.ncols();
    if n == 0 || t_total == 0 {
        return Err(Error::ShapeMismatch("empty panel".into()));
    }
    let keys: Vec<Option<usize>> = (0..n).map(|i| adoption_time(w, i)).collect();
    if keys[0].is_some() {
        return Err(Error::NoNeverTreatedUnit);
    }
    if let Some(unit) = keys.iter().position(|k| *k == Some(0)) {
        return Err(Error::NoPreTreatmentPeriod { unit });
    }

    let mut group_sizes = Vec::new();
    let mut run = 1;
    for i in 1..n {
        if keys[i] == keys[i - 1] {
            run += 1;
        } else {
            group_sizes.push(run);
            run = 1;
        }
    }
    group_sizes.push(run);

    // Distinct adoption times in ascending order give the segment starts.
    let mut starts: Vec<usize> = keys.iter().flatten().copied().collect();
    starts.sort_unstable();
    starts.dedup();
    let mut bounds = vec![0];
    bounds.extend(starts);
    bounds.push(t_total);
    let segment_lengths: Vec<usize> = bounds.windows(2).map(|b| b[1] - b[0]).collect();

    let r = group_sizes.len();
    debug_assert_eq!(segment_lengths.len(), r);
    let mut partition = BlockPartition {
        group_sizes,
        segment_lengths,
        treated_blocks: BTreeSet::new(),
    };
    for xi in 1..=r {
        let first_row = partition.group_rows(xi).start;
        for eta in 1..=r {
            let first_col = partition.segment_cols(eta).start;
            if w[(first_row, first_col)] {
                partition.treated_blocks.insert((xi, eta));
            }
        }
    }
    Ok(partition)
}

/// Four-block sub-panel carved out of a staggered grid to impute one target
/// block. Regions A, B and C hold untreated outcomes; region D (bottom right)
/// is treated as missing in full, and the target block sits inside D.
#[derive(Debug, Clone, PartialEq)]
pub struct FourBlockView {
    pub outcomes: DMatrix<f64>,
    pub indicator: DMatrix<bool>,
    pub covariates: DMatrix<f64>,
    /// Number of rows in the top (control) part, `N1`.
    pub control_rows: usize,
    /// Number of columns in the left (pre-treatment) part, `T1`.
    pub pre_periods: usize,
    /// Parent-panel row of every view row.
    pub origin_rows: Vec<usize>,
    /// Parent-panel column of every view column.
    pub origin_cols: Vec<usize>,
    /// Target block rows, relative to the view.
    pub target_rows: Range<usize>,
    /// Target block columns, relative to the view.
    pub target_cols: Range<usize>,
    pub target_block: (usize, usize),
    pub k1: usize,
    pub k2: usize,
}

impl FourBlockView {
    /// Wraps a panel that already has the four-block layout (top `N1` rows
    /// untreated, bottom rows treated from a common period on).
    pub fn from_four_block_panel(panel: &PanelDataset) -> Result<Self> {
        let (sorted, order) = validate_and_sort(panel)?;
        if order.iter().enumerate().any(|(k, &i)| k != i) {
            return Err(Error::UnsortedPanel);
        }
        let partition = extract_block_partition(sorted.treatment())?;
        if partition.r() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "expected a four-block design, found {} groups",
                partition.r()
            )));
        }
        build_four_block(&sorted, &partition, 2, 2)
    }

    pub fn n_rows(&self) -> usize {
        self.outcomes.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.outcomes.ncols()
    }

    /// Outcomes in region D, the block to impute.
    pub fn treated_region(&self) -> DMatrix<f64> {
        self.outcomes
            .view(
                (self.control_rows, self.pre_periods),
                (self.n_rows() - self.control_rows, self.n_cols() - self.pre_periods),
            )
            .into_owned()
    }

    pub fn with_outcomes(&self, outcomes: DMatrix<f64>) -> Self {
        assert_eq!(outcomes.shape(), self.outcomes.shape());
        Self {
            outcomes,
            ..self.clone()
        }
    }
}

/// Builds the four-block view that isolates treated block `(xi0, eta0)`.
///
/// With `k1 = r + 1 - eta0` and `k2 = r + 1 - xi0`, region A spans groups
/// `1..=k1` × segments `1..=k2`, B spans groups `1..=k1` × segments
/// `k2+1..=eta0`, C spans groups `k1+1..=xi0` × segments `1..=k2` and D spans
/// groups `k1+1..=xi0` × segments `k2+1..=eta0`.
pub fn build_four_block(
    panel: &PanelDataset,
    partition: &BlockPartition,
    xi0: usize,
    eta0: usize,
) -> Result<FourBlockView> {
    let r = partition.r();
    if xi0 == 0 || eta0 == 0 || xi0 > r || eta0 > r || !partition.is_treated(xi0, eta0) {
        return Err(Error::UntreatedTargetBlock { xi: xi0, eta: eta0 });
    }
    let k1 = r + 1 - eta0;
    let k2 = r + 1 - xi0;

    let rows = partition.groups_rows(1, xi0);
    let cols = partition.segments_cols(1, eta0);
    let control_rows = partition.groups_rows(1, k1).end;
    let pre_periods = partition.segments_cols(1, k2).end;
    let n = rows.len();
    let t = cols.len();

    let outcomes = panel.outcomes().view((0, 0), (n, t)).into_owned();
    let covariates = panel
        .covariates()
        .view((0, 0), (n, panel.n_covariates()))
        .into_owned();
    let indicator = DMatrix::from_fn(n, t, |i, c| i >= control_rows && c >= pre_periods);

    Ok(FourBlockView {
        outcomes,
        indicator,
        covariates,
        control_rows,
        pre_periods,
        origin_rows: rows.collect(),
        origin_cols: cols.collect(),
        target_rows: partition.group_rows(xi0),
        target_cols: partition.segment_cols(eta0),
        target_block: (xi0, eta0),
        k1,
        k2,
    })
}

/// Unit-specific average treatment effects on the treated.
#[derive(Debug, Clone, PartialEq)]
pub struct AttEstimate {
    /// `None` for never-treated units.
    pub per_unit: Vec<Option<f64>>,
    pub treated_period_counts: Vec<usize>,
}

impl AttEstimate {
    /// Treated-cell weighted mean effect over all treated cells.
    pub fn overall(&self) -> Result<f64> {
        let cells: usize = self.treated_period_counts.iter().sum();
        if cells == 0 {
            return Err(Error::NoTreatedCells);
        }
        let total: f64 = self
            .per_unit
            .iter()
            .zip(&self.treated_period_counts)
            .filter_map(|(tau, &n)| tau.map(|tau| tau * n as f64))
            .sum();
        Ok(total / cells as f64)
    }
}

/// Averages `Y - Ŷ(0)` over each unit's treated periods. `imputed` must be
/// finite at every treated cell.
pub fn att_from_imputation(panel: &PanelDataset, imputed: &DMatrix<f64>) -> Result<AttEstimate> {
    if imputed.shape() != panel.outcomes().shape() {
        return Err(Error::ShapeMismatch(format!(
            "imputed matrix is {:?}, panel is {:?}",
            imputed.shape(),
            panel.outcomes().shape()
        )));
    }
    let mut per_unit = Vec::with_capacity(panel.n_units());
    let mut counts = Vec::with_capacity(panel.n_units());
    for i in 0..panel.n_units() {
        let mut sum = 0.0;
        let mut count = 0usize;
        for t in 0..panel.n_periods() {
            if panel.is_treated(i, t) {
                let y0 = imputed[(i, t)];
                if !y0.is_finite() {
                    return Err(Error::MissingImputedCell { unit: i, period: t });
                }
                sum += panel.outcomes()[(i, t)] - y0;
                count += 1;
            }
        }
        per_unit.push((count > 0).then(|| sum / count as f64));
        counts.push(count);
    }
    Ok(AttEstimate {
        per_unit,
        treated_period_counts: counts,
    })
}

/// Overall ATT: cell-weighted mean of `Y - Ŷ(0)` over treated cells.
pub fn aggregate_att(estimate: &AttEstimate) -> Result<f64> {
    estimate.overall()
}
