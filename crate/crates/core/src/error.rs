use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("sequence of length {len} is too short for kernel size {kernel}")]
    LevelTooShort { len: usize, kernel: usize },

    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("incompatible labels: {0:?}")]
    UnknownLabels(Vec<String>),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("pyramid level {level} does not exist (sentence has {levels} levels)")]
    NoSuchLevel { level: usize, levels: usize },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
