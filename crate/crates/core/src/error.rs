use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by tensor, autograd, group and adapter operations.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid shape {dims:?}: {reason}")]
    InvalidShape { dims: Vec<usize>, reason: &'static str },

    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: dtype mismatch")]
    DTypeMismatch { op: &'static str },

    #[error("{op}: non-finite value at index {index:?}")]
    NonFinite { op: &'static str, index: Vec<usize> },

    #[error("{op}: domain violation at index {index:?} (value {value})")]
    Domain {
        op: &'static str,
        index: Vec<usize>,
        value: f64,
    },

    #[error("group membership violated at index {index:?}: |{value}| <= {eps}")]
    NotAMember { index: Vec<usize>, value: f64, eps: f64 },

    #[error("taylor surrogate left the group at index {index:?}: |1 + {delta}| <= {eps}")]
    LeftGroup { index: Vec<usize>, delta: f64, eps: f64 },

    #[error("exponential overflow guard tripped at index {index:?} (value {value})")]
    ExpOverflow { index: Vec<usize>, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{0}")]
    State(String),

    #[error("no convergence after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },

    #[error(transparent)]
    Format(#[from] crate::format::FormatError),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
