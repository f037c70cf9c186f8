use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = IdrError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum IdrError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error at {path}: {msg}")]
    Data { path: PathBuf, msg: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl IdrError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        IdrError::Shape(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        IdrError::Numeric(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        IdrError::Parameter(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        IdrError::Format(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IdrError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        IdrError::Data {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
