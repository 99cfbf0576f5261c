use thiserror::Error;

/// Errors raised by tensor construction, operations and the gradient tape.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: configuration error: {msg}")]
    Config { op: &'static str, msg: String },

    #[error("{op}: contract violation: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error("{op}: produced a non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("{op}: degenerate input: {msg}")]
    Degenerate { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

pub(crate) fn contract<T>(op: &'static str, msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Contract {
        op,
        msg: msg.into(),
    })
}

pub(crate) fn config<T>(op: &'static str, msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Config {
        op,
        msg: msg.into(),
    })
}
