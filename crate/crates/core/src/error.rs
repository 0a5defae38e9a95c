use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on shapes, ranges or configuration was violated.
    #[error("{op}: contract violation: {msg}")]
    Contract { op: &'static str, msg: String },

    /// A loss or gradient became NaN or infinite.
    #[error("{op}: non-finite value at epoch {epoch}: {msg}")]
    Numeric {
        op: &'static str,
        epoch: usize,
        msg: String,
    },

    /// A metric is not defined for the given input (single class, T = 1, ...).
    #[error("{op}: undefined metric: {msg}")]
    UndefinedMetric { op: &'static str, msg: String },

    #[error("load_dataset: {path}:{line}: {msg}")]
    Load {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{op}: I/O error on {path}: {source}")]
    Io {
        op: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{op}: JSON error in {path}: {source}")]
    Json {
        op: &'static str,
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn numeric(op: &'static str, epoch: usize, msg: impl Into<String>) -> Self {
        Error::Numeric {
            op,
            epoch,
            msg: msg.into(),
        }
    }

    pub(crate) fn undefined(op: &'static str, msg: impl Into<String>) -> Self {
        Error::UndefinedMetric {
            op,
            msg: msg.into(),
        }
    }

    /// True for errors caused by NaN/inf during optimisation.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric { .. })
    }
}
