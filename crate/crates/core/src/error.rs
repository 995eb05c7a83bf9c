//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Singular or ill-conditioned matrix where an invertible one is required.
    #[error("singular matrix: {0}")]
    Singular(String),
    /// Input lies outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// The operation has no closed form at this dimension.
    #[error("unsupported dimension: {0}")]
    UnsupportedDimension(String),
    /// An iteration failed to converge within its bound.
    #[error("no convergence: {0}")]
    NonConvergence(String),
    /// Invalid configuration value or combination.
    #[error("configuration error: {0}")]
    Config(String),
    /// Malformed input file.
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
