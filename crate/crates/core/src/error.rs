use std::path::PathBuf;

/// Errors raised across the pipeline.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    /// A configuration value violates its documented range or divisibility rule.
    #[error("configuration error: {0}")]
    Config(String),

    /// Inputs have inconsistent shapes or are otherwise unusable.
    #[error("input error: {0}")]
    Input(String),

    /// A non-finite value appeared during a forward or backward pass.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A metric is undefined for the given inputs (e.g. AUC with one class).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A file did not match its expected binary or text format.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
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
}

pub type Result<T> = std::result::Result<T, Error>;
