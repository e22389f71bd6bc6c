use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed archive: {0}")]
    Format(String),
    #[error("truncated archive: {0}")]
    Truncation(String),
    #[error("invalid tensor data: {0}")]
    Data(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("incompatible archives: {0}")]
    Compat(String),
    #[error("bad coefficients: {0}")]
    Coeff(String),
    #[error("cannot bind weights: {0}")]
    Bind(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid plan request: {0}")]
    Plan(String),
    #[error("cannot sample: {0}")]
    Sample(String),
    #[error("degenerate: {0}")]
    Degenerate(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("bad parameter: {0}")]
    Param(String),
    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
