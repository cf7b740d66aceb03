//! Error type shared by every module of the core crate.

use thiserror::Error;

/// Failures raised while validating problems, solving for optima or training.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LabError {
    /// A covariance matrix has a non-positive eigenvalue.
    #[error("covariance `{matrix}` is not positive definite (minimum eigenvalue {min_eigenvalue:e})")]
    NonPsdCovariance { matrix: String, min_eigenvalue: f64 },

    /// A covariance matrix is too far from symmetric to be repaired by averaging.
    #[error("covariance `{matrix}` is asymmetric (max |A - A^T| = {asymmetry:e})")]
    AsymmetricCovariance { matrix: String, asymmetry: f64 },

    /// Mixture weights do not sum to one.
    #[error("task weights do not sum to one (|sum - 1| = {deviation:e})")]
    WeightsNotNormalized { deviation: f64 },

    /// A mixture weight is negative.
    #[error("task {task} has negative weight {weight}")]
    NegativeWeight { task: usize, weight: f64 },

    /// Two objects that must share a shape do not.
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: String,
        found: String,
    },

    /// The feature covariance could not be factorized for a solve.
    #[error("feature covariance is singular and cannot be solved against")]
    SingularSigmaX,

    /// A weight matrix (or a shifted system) is too ill-conditioned to invert.
    #[error("matrix is singular or ill-conditioned (condition estimate {condition:e})")]
    SingularW { condition: f64 },

    /// A training restart produced a non-finite loss.
    #[error("training diverged in restart {restart} at iteration {iteration}")]
    DivergenceDetected { restart: usize, iteration: usize },

    /// A configuration value is outside its admissible range.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn mismatch(what: &str, expected: impl ToString, found: impl ToString) -> LabError {
    LabError::DimensionMismatch {
        what: what.to_string(),
        expected: expected.to_string(),
        found: found.to_string(),
    }
}
