use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("empty region mask: bbox {0:?} covers no patch center")]
    EmptyMask([f64; 4]),
    #[error("mask grid {mask:?} does not match patch grid {patches:?}")]
    Alignment { mask: (usize, usize), patches: (usize, usize) },
    #[error("config error: {0}")]
    Config(String),
    #[error("gallery construction: {0}")]
    Gallery(String),
    #[error("bbox perturbation: {0}")]
    Perturbation(String),
    #[error("data error in {path}: {msg}")]
    Data { path: PathBuf, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
