//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Matrix or dataset dimensions do not line up for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A parameter is outside its documented domain (e.g. non-positive temperature).
    #[error("invalid parameter `{name}`: {detail}")]
    Parameter { name: &'static str, detail: String },

    /// A computation produced NaN or infinity.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Configuration that cannot be run (missing classes, bad schedule, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an operation contract (e.g. unlabeled row in a
    /// supervised loss).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An EM basis lost all responsibility mass and must be re-seeded.
    #[error("degenerate basis {index}: responsibility mass {mass:e} below threshold")]
    DegenerateBasis { index: usize, mass: f64 },

    /// Text-format problems (CSV rows, checkpoint headers, JSON payloads).
    /// `line` is 1-based and 0 when no line applies.
    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
