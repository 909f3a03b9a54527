use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape for {op}: {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parameter group `{0}` not found")]
    MissingGroup(String),

    #[error("parameter `{name}`: {reason}")]
    Parameter { name: String, reason: String },

    #[error("cannot sample episode: {0}")]
    Sampling(String),

    #[error("vector norm {0:e} too small for cosine distance")]
    DegenerateNorm(f64),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("malformed {format} data at byte {offset}: {reason}")]
    Malformed {
        format: &'static str,
        offset: usize,
        reason: String,
    },

    #[error("non-finite loss at epoch {epoch}, task {task}")]
    NonFiniteLoss { epoch: usize, task: usize },

    #[error("{path}: {source}")]
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

    /// Failures that happen while a run is in progress, as opposed to bad
    /// inputs detected up front.
    pub fn is_runtime_abort(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. })
    }
}
