//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor/matrix shapes.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Invalid configuration value or unknown key.
    #[error("configuration error: {0}")]
    Config(String),

    /// API misuse (e.g. backward on a non-scalar output).
    #[error("usage error: {0}")]
    Usage(String),

    /// Non-finite values or failed numerical procedure.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Covariance matrix is not positive semi-definite.
    #[error("covariance error: {0}")]
    Covariance(String),

    /// Matrix too close to zero to normalize.
    #[error("degenerate matrix: {0}")]
    DegenerateMatrix(String),

    /// All particle weights vanished.
    #[error("particle degeneracy at step {step}: {msg}")]
    Degeneracy { step: usize, msg: String },

    /// Iterative method failed to converge.
    #[error("convergence error: {0}")]
    Convergence(String),

    /// Malformed or inconsistent data files.
    #[error("data error: {0}")]
    Data(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 numerical, 2 usage/config, 3 data.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            _ => 1,
        }
    }
}
