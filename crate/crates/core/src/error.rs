use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands (or an operand and an operator) disagree on shape.
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    /// An operation produced NaN or infinity.
    NonFinite { op: &'static str },
    /// `backward` was called on a tensor with more than one element.
    NotScalar { shape: Vec<usize> },
    /// A parameter is outside its documented range.
    InvalidArgument(String),
    /// A matrix that must be positive definite (or invertible) is not.
    Singular(String),
    /// Optimization or training blew up.
    Divergence { step: usize, detail: String },
    /// A variable from an already-consumed tape was used.
    StaleVariable,
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(op: &'static str, expected: &[usize], found: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, expected, found } => {
                write!(f, "{op}: shape mismatch, expected {expected:?}, found {found:?}")
            }
            Error::NonFinite { op } => write!(f, "{op}: non-finite value produced"),
            Error::NotScalar { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Singular(msg) => write!(f, "singular matrix: {msg}"),
            Error::Divergence { step, detail } => write!(f, "diverged at step {step}: {detail}"),
            Error::StaleVariable => write!(f, "variable belongs to a tape that was already consumed"),
        }
    }
}

impl core::error::Error for Error {}
