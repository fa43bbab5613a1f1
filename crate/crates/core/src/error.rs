use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("scene placement failed after {0} attempts")]
    Placement(usize),

    #[error("prompt does not parse: {0}")]
    Prompt(String),

    #[error("reward `{name}` failed: {reason}")]
    Reward { name: String, reason: String },

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("image codec: {0}")]
    Codec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn reward(name: &str, reason: impl Into<String>) -> Self {
        Error::Reward {
            name: name.to_string(),
            reason: reason.into(),
        }
    }
}
