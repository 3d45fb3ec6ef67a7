use thiserror::Error;

use crate::tensor::Dims;

#[derive(Debug, Error)]
pub enum Error {
    #[error("data length {got} does not match dims {dims} (expected {expected})")]
    LengthMismatch { dims: Dims, expected: usize, got: usize },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: {value} is not divisible by {divisor}")]
    Divisibility {
        op: &'static str,
        value: usize,
        divisor: usize,
    },

    #[error("invalid argument for {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("dtype mismatch: expected {expected}, found {found}")]
    DType { expected: &'static str, found: &'static str },

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("malformed FLT1 data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure_divisible(op: &'static str, value: usize, divisor: usize) -> Result<()> {
    if divisor == 0 || value % divisor != 0 {
        return Err(Error::Divisibility { op, value, divisor });
    }
    Ok(())
}

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape {
        op,
        detail: detail.into(),
    })
}

pub(crate) fn invalid<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument {
        op,
        detail: detail.into(),
    })
}
