//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not satisfy an operation's contract.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A precondition or invariant was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// NaN or Inf appeared at an operation boundary.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Failure while parsing or validating a configuration file.
    #[error("config error: {0}")]
    Config(String),

    /// A persisted artifact failed its integrity check.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
