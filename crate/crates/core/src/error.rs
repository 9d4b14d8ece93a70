//! Error type for the numeric substrate (tensors, autograd, parameters).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad stride: {0}")]
    BadStride(String),
    #[error("non-finite value produced by {0}")]
    NumericalError(String),
    #[error("dimension must be even for positional encoding, got {0}")]
    OddDim(usize),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter name `{0}` must start with `enc.` or `dec.`")]
    BadNamespace(String),
}
