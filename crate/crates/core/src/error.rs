use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numerical substrate and the model pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("sampling ratio {0} is outside (0, 1]")]
    InvalidRatio(f64),
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(&'static str),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
