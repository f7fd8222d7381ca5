use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation precondition (bad count, empty input, ...).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A model or run configuration is inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A text record could not be parsed. Lines are 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A record parsed but contradicts the dataset metadata.
    #[error("schema error at line {line}: {msg}")]
    Schema { line: usize, msg: String },

    /// Inputs are structurally valid but semantically inconsistent
    /// (duplicate ids, unknown videos, out-of-range labels, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A binary file is corrupt or has the wrong magic/version.
    #[error("format error at offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// A numeric computation left the finite range or a system was singular.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {msg}")]
    Training { step: u64, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
