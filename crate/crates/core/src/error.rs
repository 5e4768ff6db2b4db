use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong while building, fitting or evaluating a panel estimator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("treatment indicator at unit {unit}, period {period} is not 0 or 1")]
    NonBinaryIndicator { unit: usize, period: usize },

    #[error("unit {unit} leaves treatment at period {period}; treatment must be irreversible")]
    ReversedTreatment { unit: usize, period: usize },

    #[error("panel has no never-treated unit")]
    NoNeverTreatedUnit,

    #[error("unit {unit} is treated from the first period, leaving no pre-treatment data")]
    NoPreTreatmentPeriod { unit: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("rows are not sorted by descending adoption time")]
    UnsortedPanel,

    #[error("block ({xi}, {eta}) is not a treated block")]
    UntreatedTargetBlock { xi: usize, eta: usize },

    #[error("no imputed counterfactual for treated cell (unit {unit}, period {period})")]
    MissingImputedCell { unit: usize, period: usize },

    #[error("panel has no treated cells")]
    NoTreatedCells,

    #[error("network dimensions must all be at least 1")]
    ZeroDimension,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("backward pass requested without a matching forward pass")]
    NoForwardState,

    #[error("sample mask selects no training samples")]
    EmptyMask,

    #[error("training loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("period {period} has no control units")]
    NoControlUnits { period: usize },

    #[error("design matrix is rank deficient; use a positive ridge penalty")]
    RankDeficientDesign,

    #[error("no untreated entries to train on")]
    EmptyControlSet,

    #[error("four-block region {0} is empty")]
    EmptyRegion(&'static str),

    #[error("vertical regression needs at least 2 pre-treatment periods, got {0}")]
    InsufficientPrePeriods(usize),

    #[error("no observed cells to complete from")]
    NoObservedCells,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown estimator `{0}`")]
    UnknownEstimator(String),

    #[error("invalid staggered panel: {0}")]
    InvalidStaggeredPanel(Box<Error>),

    #[error("subproblem ({xi}, {eta}) failed: {source}")]
    Subproblem {
        xi: usize,
        eta: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("header mismatch: {0}")]
    HeaderMismatch(String),

    #[error("non-numeric cell at row {row}, column {col} in {file}")]
    NonNumericCell { file: String, row: usize, col: usize },

    #[error("unit `{0}` could not be joined across input files")]
    JoinFailure(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse classification used for CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::NonFiniteLoss { .. }
            | Error::RankDeficientDesign
            | Error::ZeroDimension
            | Error::DimensionMismatch { .. }
            | Error::NoForwardState => ErrorClass::Numeric,
            Error::InvalidConfig(_) | Error::UnknownEstimator(_) => ErrorClass::Usage,
            Error::Subproblem { source, .. } | Error::InvalidStaggeredPanel(source) => {
                source.class()
            }
            _ => ErrorClass::Data,
        }
    }

    /// Short stable identifier for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonBinaryIndicator { .. } => "non_binary_indicator",
            Error::ReversedTreatment { .. } => "reversed_treatment",
            Error::NoNeverTreatedUnit => "no_never_treated_unit",
            Error::NoPreTreatmentPeriod { .. } => "no_pre_treatment_period",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::UnsortedPanel => "unsorted_panel",
            Error::UntreatedTargetBlock { .. } => "untreated_target_block",
            Error::MissingImputedCell { .. } => "missing_imputed_cell",
            Error::NoTreatedCells => "no_treated_cells",
            Error::ZeroDimension => "zero_dimension",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NoForwardState => "no_forward_state",
            Error::EmptyMask => "empty_mask",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::NoControlUnits { .. } => "no_control_units",
            Error::RankDeficientDesign => "rank_deficient_design",
            Error::EmptyControlSet => "empty_control_set",
            Error::EmptyRegion(_) => "empty_region",
            Error::InsufficientPrePeriods(_) => "insufficient_pre_periods",
            Error::NoObservedCells => "no_observed_cells",
            Error::InvalidConfig(_) => "invalid_config",
            Error::UnknownEstimator(_) => "unknown_estimator",
            Error::InvalidStaggeredPanel(_) => "invalid_staggered_panel",
            Error::Subproblem { .. } => "subproblem",
            Error::MissingFile(_) => "missing_file",
            Error::HeaderMismatch(_) => "header_mismatch",
            Error::NonNumericCell { .. } => "non_numeric_cell",
            Error::JoinFailure(_) => "join_failure",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
