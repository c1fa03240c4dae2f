use std::io;

use thiserror::Error;

/// Errors raised by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Unknown format name, unsupported bit width, bad config key.
    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite values, empty tensors, shape or granularity mismatches.
    #[error("input error: {0}")]
    Input(String),

    /// A value that was expected to sit exactly on a format grid does not.
    #[error("precision error: {value} is not representable in {format}")]
    Precision { format: String, value: f64 },

    /// Malformed tensor file.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Integer accumulator left its 32-bit range.
    #[error("accumulator overflow after {terms} terms")]
    Overflow { terms: usize },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Short machine-readable tag used by the CLI and the C ABI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Precision { .. } => "precision",
            Error::Format { .. } => "format",
            Error::Overflow { .. } => "overflow",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
