use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate parameter: {0}")]
    DegenerateParameter(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("optimizer failure on parameter `{param}`: {reason}")]
    Optimizer { param: String, reason: String },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    Truncated { path: PathBuf, expected: u64, found: u64 },

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code for the command-line driver: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::Contract(_) => 1,
            Error::Dimension { .. }
            | Error::Format { .. }
            | Error::Truncated { .. }
            | Error::BadMagic { .. }
            | Error::Data(_)
            | Error::Io { .. } => 2,
            Error::Numeric(_) | Error::DegenerateParameter(_) | Error::Optimizer { .. } => 3,
        }
    }
}
