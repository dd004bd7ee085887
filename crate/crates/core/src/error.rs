use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing input file {0}")]
    MissingFile(PathBuf),

    #[error("parse error in {file}: {msg}")]
    Parse { file: String, msg: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("graph assembly failed: {0}")]
    Assembly(String),

    #[error("non-finite loss component {component} at epoch {epoch}")]
    NonFinite { component: String, epoch: usize },

    #[error("{0}")]
    Eval(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(file: impl Into<String>, msg: impl std::fmt::Display) -> Self {
        Error::Parse { file: file.into(), msg: msg.to_string() }
    }

    /// Validation and config errors are caller mistakes; everything else is a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Validation(_) | Error::Config(_) | Error::MissingFile(_) | Error::Parse { .. })
    }
}
