//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("optimizer did not converge after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    NoConvergence {
        iterations: usize,
        grad_norm: f64,
        /// Best iterate found so far, packed.
        best: Vec<f64>,
    },

    #[error("matrix not positive definite after conditioning (smallest eigenvalue {min_eigenvalue:.6e}, trace {trace:.6e})")]
    NotPositiveDefinite { min_eigenvalue: f64, trace: f64 },

    #[error("chain {chain} diverged at iteration {iteration}: non-finite log density")]
    Divergence {
        chain: usize,
        iteration: usize,
        /// State at which the divergence occurred.
        state: Vec<f64>,
    },

    #[error("value {value} outside the domain of {what}")]
    Domain { what: String, value: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn dim(context: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            found,
        }
    }
}
