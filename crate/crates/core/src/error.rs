//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by validation, construction, and estimation routines.
#[derive(Debug, Error)]
pub enum Error {
    /// Inputs have inconsistent or invalid shapes/values.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// The control design does not have full column rank.
    #[error("controls are rank deficient: rank {rank} < {cols} columns")]
    RankDeficientControls { rank: usize, cols: usize },

    /// A cluster partition failed validation.
    #[error("invalid cluster partition: {0}")]
    InvalidPartition(String),

    /// An exclusion matrix failed validation.
    #[error("invalid exclusion matrix: {0}")]
    InvalidExclusion(String),

    /// The exact vectorized construction was requested above its size limit.
    #[error("oracle construction limited to {limit} observations, got {n}")]
    OracleSizeExceeded { n: usize, limit: usize },

    /// The estimator denominator `x' A x` is numerically degenerate.
    #[error("degenerate denominator x'Ax = {value:.3e} (floor {floor:.3e})")]
    DegenerateDenominator { value: f64, floor: f64 },

    /// Too many Monte Carlo replications failed.
    #[error("{failed} of {total} replications failed (above the 1% abort threshold)")]
    SimulationAborted { failed: usize, total: usize },

    /// A simulation configuration could not be parsed or is inconsistent.
    #[error("invalid simulation config: {0}")]
    Config(String),

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// CSV parse failure.
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
