use std::path::PathBuf;

use denviscom_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite state at step {step}")]
    NonFiniteState { step: usize },

    #[error("{path}: format error: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: truncated file: expected {expected} bytes, found {found}")]
    Length {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("checkpoint checksum mismatch")]
    Checksum,

    #[error("incompatible configuration: {}", .0.join("; "))]
    ConfigMismatch(Vec<String>),

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
