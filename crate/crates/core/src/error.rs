use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("corrupt bundle {path}: {reason}")]
    Corrupt { path: String, reason: String },

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape { name: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("non-finite value in `{0}`")]
    NonFinite(String),

    #[error("training diverged at {stage} epoch {epoch} step {step}: {reason}")]
    Diverged { stage: String, epoch: usize, step: usize, reason: String },

    #[error("insufficient frames for person `{person}`: need {needed}, have {available}")]
    InsufficientFrames { person: String, needed: usize, available: usize },

    #[error("output directory {0} is not empty (use --force to overwrite)")]
    OutputExists(PathBuf),

    #[error("{0}")]
    Invalid(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { field: field.into(), reason: reason.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Validation-class errors map to exit code 1, everything else to 2.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::OutputExists(_) | Error::Json(_))
    }
}
