use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no keypoint with visibility > 0")]
    NoVisibleKeypoints,
    #[error("area must be positive, got {0}")]
    NonPositiveArea(f64),
    #[error("scale and falloff must be positive (s = {scale}, k = {falloff})")]
    InvalidScale { scale: f64, falloff: f64 },
    #[error("keypoint count mismatch: expected {expected}, got {actual}")]
    KeypointCountMismatch { expected: usize, actual: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cotangent shape disagrees with recorded forward pass: {0}")]
    TapeMismatch(String),
    #[error("non-finite loss at step {step}: score loss {score_loss}, offset loss {offset_loss}")]
    NonFiniteLoss {
        step: usize,
        score_loss: f64,
        offset_loss: f64,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("annotation {annotation_id} has {actual} keypoints, category declares {expected}")]
    InconsistentK {
        annotation_id: u64,
        expected: usize,
        actual: usize,
    },
    #[error("unknown image id {0}")]
    UnknownImageId(u64),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
