//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad experiment or module configuration (unknown ids, out-of-range values).
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor/shape contract violation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Numerical failure (NaN/Inf loss, degenerate input).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A precondition on an operation's input was violated.
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
