use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: index {index} at position {position} is out of range for extent {bound}")]
    Index {
        op: &'static str,
        position: usize,
        index: usize,
        bound: usize,
    },

    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (stage losses {stage_losses:?})")]
    NonFinite {
        epoch: usize,
        batch: usize,
        stage_losses: Vec<f64>,
    },

    #[error("{}: {reason}", path.display())]
    Io { path: PathBuf, reason: std::io::Error },
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            reason: source,
        }
    }
}
