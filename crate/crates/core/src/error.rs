use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("non-finite value produced by node {node} ({op})")]
    NonFiniteNode { node: usize, op: &'static str },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unbound graph input `{0}`")]
    UnboundInput(String),
    #[error("duplicate leaf name `{0}`")]
    DuplicateLeaf(String),
    #[error("backward seed must be a scalar node, node {node} has shape {shape:?}")]
    NonScalarSeed { node: usize, shape: Vec<usize> },
    #[error("malformed tensor encoding: {0}")]
    Format(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
