use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("coefficient evaluation returned a non-finite value at (t={t}, x={x})")]
    EvaluationFailure { t: f64, x: f64 },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("horizon mismatch: {x} vs {y}")]
    HorizonMismatch { x: f64, y: f64 },

    #[error("tensor induction supports at most 3 marginals, got {0}")]
    UnsupportedDimension(usize),

    #[error("hypothesis violation: {0}")]
    HypothesisViolation(String),

    #[error("domination violated at {count} grid points, first at x={first_x} (lhs={lhs}, rhs={rhs})")]
    DominationViolation {
        count: usize,
        first_x: f64,
        lhs: f64,
        rhs: f64,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
