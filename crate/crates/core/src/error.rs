use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("zero variance: all {0} components are equal and eps = 0")]
    ZeroVariance(usize),

    #[error("row {row} is off the radius-sqrt(d) sphere (norm {norm}, expected {radius})")]
    NotOnSphere { row: usize, norm: f64, radius: f64 },

    #[error("not a probability distribution: {0}")]
    NotADistribution(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("negative entry {value} at ({row}, {col})")]
    NegativeEntry { row: usize, col: usize, value: f64 },

    #[error("row-sum violation: row {row} sums to {sum}, expected 1 within {tol:e}")]
    RowSumViolation { row: usize, sum: f64, tol: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("CG breakdown at iteration {iteration}: search-direction curvature {curvature} <= 0")]
    Breakdown { iteration: usize, curvature: f64 },

    #[error("unknown function id `{0}` (expected square, cube or exp-martingale)")]
    UnknownFunction(String),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    IndexOutOfRange { id: usize, vocab: usize },

    #[error("bad config: {0}")]
    BadConfig(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
}
