use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library.
///
/// `Contract` covers violated preconditions of the numeric operations
/// (dimension mismatches, empty inputs, out-of-range values). `Config` is
/// raised while building models or runs from an invalid configuration.
#[derive(Debug, Error)]
pub enum HcvtError {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("training diverged: {0}")]
    Diverged(String),
}

pub type Result<T, E = HcvtError> = std::result::Result<T, E>;

impl HcvtError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HcvtError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        HcvtError::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

macro_rules! contract {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err($crate::error::HcvtError::Contract(format!($($arg)*)));
        }
    };
}
pub(crate) use contract;
