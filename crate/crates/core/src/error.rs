use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate look-at: {0}")]
    DegenerateLookAt(String),

    #[error("insufficient overlap for depth alignment: {found} pixels (need {required})")]
    InsufficientOverlap { found: usize, required: usize },

    #[error("degenerate depth fit: {0}")]
    DegenerateFit(String),

    #[error("primitive behind the camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("no valid pixels to initialize a gaussian field from")]
    EmptyField,

    #[error("loss became non-finite at iteration {iteration}: {value}")]
    NonFiniteLoss { iteration: usize, value: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("image too small: {0}")]
    TooSmall(String),

    #[error("no valid reference frame outside clip {start}..{end} of a {len}-frame video")]
    NoValidReference { start: usize, end: usize, len: usize },

    #[error("service unavailable after {attempts} attempts: {message}")]
    ServiceUnavailable { attempts: usize, message: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn shape(message: impl Into<String>) -> Self {
        Error::ShapeMismatch(message.into())
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidInput(message.into())
    }
}
