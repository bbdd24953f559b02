//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or prior parameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// Vector/matrix dimensions do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A hard capacity limit (e.g. simultaneous overlapping arrivals) was hit.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// Malformed input file; carries line/field context where available.
    #[error("parse error in {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Model file version does not match this build.
    #[error("model version mismatch: found {found}, expected {expected}")]
    ModelVersion { found: u32, expected: u32 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
