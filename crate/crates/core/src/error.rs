use alloc::string::String;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch at {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown {what} `{name}` (valid: {valid})")]
    Unknown {
        what: &'static str,
        name: String,
        valid: String,
    },
    #[error("backward requested for {0}, which was never produced by a forward pass on this tape")]
    NoForward(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error("invalid genotype: {0}")]
    InvalidGenotype(String),
    #[error("path count exceeds cap of {cap}; use a smaller topology or raise the cap")]
    PathCap { cap: usize },
    #[error("dataset configuration: {0}")]
    DatasetConfig(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
