use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the decomposition, modeling and search routines.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("rank {rank} out of range [{min}, {max}]")]
    Rank { rank: usize, min: usize, max: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("load error in layer `{layer}`: {message}")]
    Load { layer: String, message: String },

    #[error("resource budget infeasible: {0}")]
    Budget(String),

    #[error("search infeasible: {0}")]
    Infeasible(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
