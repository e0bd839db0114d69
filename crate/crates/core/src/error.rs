use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("column `{0}` not found")]
    MissingColumn(String),

    #[error("non-numeric value {value:?} at row {row}, column `{column}`")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("feature `{0}` is constant on the fitting rows (min = max)")]
    ConstantFeature(String),

    #[error("training labels contain a single class")]
    SingleClass,

    #[error("ensemble member {member} failed to train: {source}")]
    MemberTraining {
        member: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite objective at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("flow has no plausibility threshold; train it or call `set_tau`")]
    MissingTau,

    #[error("artifact {path} failed verification: {reason}")]
    Artifact { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
