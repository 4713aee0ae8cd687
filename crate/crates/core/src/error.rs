use std::fmt;

use thiserror::Error;

/// The two binary covariates of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Factor {
    Gender,
    Age,
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Factor::Gender => f.write_str("gender"),
            Factor::Age => f.write_str("age"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FmemError {
    #[error("time grid needs at least 3 points, got {0}")]
    GridTooShort(usize),
    #[error("time grid is not strictly increasing at position {0}")]
    NonIncreasingGrid(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("observation time {0} does not match any design point")]
    OffGrid(f64),
    #[error("{0} effect is inestimable: every individual has the same {0} label")]
    Inestimable(Factor),
    #[error("random-effect covariance D is singular")]
    SingularCovariance,
    #[error("marginal covariance of individual {0} is not positive definite")]
    SingularMarginal(usize),
    #[error("penalized normal equations are rank deficient")]
    RankDeficient,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("every smoothing-parameter evaluation failed; first failure: {0}")]
    SelectionFailed(Box<FmemError>),
    #[error("{failed} of {total} bootstrap refits failed")]
    BootstrapFailures { failed: usize, total: usize },
    #[error("{failed} of {total} permutation refits failed")]
    PermutationFailures { failed: usize, total: usize },
    #[error("null pool is empty")]
    EmptyPool,
    #[error("requested {requested} components but the curve matrix has rank {rank}")]
    TooManyComponents { requested: usize, rank: usize },
    #[error("fits do not share a common time grid")]
    InconsistentGrids,
}

pub type Result<T> = std::result::Result<T, FmemError>;

impl FmemError {
    /// Stable snake_case label for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            FmemError::GridTooShort(_) => "grid_too_short",
            FmemError::NonIncreasingGrid(_) => "non_increasing_grid",
            FmemError::NonFinite(_) => "non_finite",
            FmemError::OffGrid(_) => "off_grid",
            FmemError::Inestimable(Factor::Gender) => "inestimable_gender",
            FmemError::Inestimable(Factor::Age) => "inestimable_age",
            FmemError::SingularCovariance => "singular_covariance",
            FmemError::SingularMarginal(_) => "singular_marginal",
            FmemError::RankDeficient => "rank_deficient",
            FmemError::Dimension(_) => "dimension",
            FmemError::InvalidInput(_) => "invalid_input",
            FmemError::SelectionFailed(_) => "selection_failed",
            FmemError::BootstrapFailures { .. } => "bootstrap_failures",
            FmemError::PermutationFailures { .. } => "permutation_failures",
            FmemError::EmptyPool => "empty_pool",
            FmemError::TooManyComponents { .. } => "too_many_components",
            FmemError::InconsistentGrids => "inconsistent_grids",
        }
    }
}
