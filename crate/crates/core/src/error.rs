use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// Variants split into two families: validation problems (bad input data,
/// bad configuration, contract violations) and runtime failures (I/O,
/// numerical breakdown). The CLI maps them to exit codes 1 and 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unknown site ids: {}", .0.join(", "))]
    UnknownSites(Vec<String>),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("mask digest mismatch for layer {layer}: checkpoint has {expected}, supplied masks give {found}")]
    DigestMismatch {
        layer: String,
        expected: String,
        found: String,
    },

    #[error("stale tape: {0}")]
    StaleTape(String),

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("gradient check failed: {0}")]
    GradientCheck(String),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by the caller's inputs rather than the runtime.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. }
                | Error::NonFiniteGradient(_)
                | Error::StaleTape(_)
                | Error::GradientCheck(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
