//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by conformal scoring, dataset generation, the network,
/// and the training loop.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition (bad label index,
    /// alpha outside (0,1), length mismatch, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Calibration could not be performed (e.g. empty score list).
    #[error("calibration error: {0}")]
    Calibration(String),

    /// A dataset spec or train config is internally inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A non-finite value surfaced mid-computation. `context` names the
    /// epoch/batch/example where it happened.
    #[error("numeric error at {context}: {message}")]
    Numeric { context: String, message: String },

    /// A serialized artifact (checkpoint, dataset file, telemetry, dump)
    /// could not be parsed or has the wrong version.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
