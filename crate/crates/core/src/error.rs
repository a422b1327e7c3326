use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the substrate, model, training and evaluation layers.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("loss mask selects no positions")]
    EmptyLoss,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("context of {got} tokens exceeds the supported maximum of {max} tokens")]
    Capacity { got: usize, max: usize },
    #[error("decoder sequence of {got} positions exceeds positional capacity {max}")]
    DecoderCapacity { got: usize, max: usize },
    #[error("segment of {got} tokens is longer than the encoder window {window}")]
    SegmentTooLong { got: usize, window: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenRange { id: u32, vocab: usize },
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
}

pub type Result<T> = core::result::Result<T, Error>;
