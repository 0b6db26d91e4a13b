//! Crate-wide error type, categorized so the CLI can map errors to exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape disagreement between operands; names both shapes.
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Invalid configuration (bad values, unknown keys, mismatched architectures).
    #[error("config error: {0}")]
    Config(String),

    /// Problems with user-supplied data (missing files, empty ROIs, unseen labels).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed on-disk formats (bad magic, truncated payloads).
    #[error("format error: {0}")]
    Format(String),

    /// Valid format, but a feature this reader deliberately does not support.
    #[error("unsupported feature: {0}")]
    Unsupported(String),

    /// Training-time failures (non-finite losses or gradients).
    #[error("training error: {0}")]
    Training(String),

    /// API contract violations (e.g. gradient check on a non-scalar output).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable category label used in logs and for CLI exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Data(_) | Error::UndefinedMetric(_) => "data",
            Error::Format(_) | Error::Unsupported(_) => "format",
            Error::Training(_) => "training",
            Error::Io(_) => "io",
        }
    }
}
