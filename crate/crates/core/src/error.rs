use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or mismatched shapes at an API boundary.
    #[error("configuration error: {0}")]
    Config(String),

    /// API called out of order (e.g. backward without a forward pass).
    #[error("usage error: {0}")]
    Usage(String),

    /// Non-finite gradients, losses or diverged training.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Dataset content violates a precondition.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed file; `field` names the offending header field or record.
    #[error("parse error in {path}: {field}: {message}")]
    Parse {
        path: PathBuf,
        field: String,
        message: String,
    },

    /// A metric requested where it is not defined (e.g. forgetting at t = 1).
    #[error("undefined metric: {0}")]
    Undefined(String),

    /// Some experiment cells failed; details are in the run manifest.
    #[error("run failed: {0}")]
    Run(String),

    #[error("missing prediction records at snapshot {snapshot}: example ids {ids:?}")]
    MissingRecords { snapshot: usize, ids: Vec<u64> },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(
        path: impl Into<PathBuf>,
        field: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Error::Parse {
            path: path.into(),
            field: field.into(),
            message: message.into(),
        }
    }
}
