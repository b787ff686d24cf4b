//! Crate-wide error type.
//!
//! Variants mirror the failure classes surfaced by the pipeline binary:
//! configuration problems, malformed or inconsistent input data, and
//! numerical failures (singular systems, non-convergent iterations).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or parameters (bad grid bounds, negative rates, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed input row; `line` is the 1-based line number in the source file.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },

    /// Numerical failure: singular or ill-conditioned system, non-convergence.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
