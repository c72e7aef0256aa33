//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or volume shapes that cannot be combined.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An architecture description that cannot be realised.
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    /// Configuration that parsed but fails validation.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A numeric value that must stay finite did not.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Inputs a metric is undefined for (e.g. an empty reference mask).
    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    /// Malformed on-disk data: volumes, sidecars, manifests, checkpoints.
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}
