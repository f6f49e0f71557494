//! Error taxonomy shared across the crate.
//!
//! The variants map onto the CLI exit-code contract: `Config` is a caller
//! mistake (exit 2), `Numeric` is a runtime numerical failure such as a
//! diverged loss (exit 3), everything else is an ordinary failure.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or precondition violation.
    #[error("configuration error: {0}")]
    Config(String),

    /// Out-of-range index into a bank, label space, or parameter tensor.
    #[error("index error: {0}")]
    Index(String),

    /// NaN/Inf activations, diverged loss, or similar numerical failure.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A metric that has no defined value for the given input
    /// (e.g. induction strength on an IWL episode, correlation of a constant).
    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn index(msg: impl Into<String>) -> Self {
        Error::Index(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn undefined(msg: impl Into<String>) -> Self {
        Error::Undefined(msg.into())
    }
}
