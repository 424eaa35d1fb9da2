use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Errors raised by the tensor kernels and the modules built on them.
#[derive(Clone, Debug, PartialEq)]
pub enum Error {
    /// An operation received tensors whose shapes break its contract.
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    /// A contract on a scalar argument was violated (dilation, lengths, ...).
    Contract { op: &'static str, reason: String },
    /// Invalid configuration value.
    Config { field: &'static str, reason: String },
    /// Requested operation is not available in the current mode.
    Unsupported(&'static str),
    /// A non-finite value appeared where finite values are required.
    NonFinite { op: &'static str },
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub(crate) fn contract(op: &'static str, reason: impl Into<String>) -> Self {
        Error::Contract {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Config {
            field,
            reason: reason.into(),
        }
    }

    /// Name of the operation or config field the error refers to.
    pub fn origin(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { op, .. } | Error::Contract { op, .. } => op,
            Error::NonFinite { op } => op,
            Error::Config { field, .. } => field,
            Error::Unsupported(what) => what,
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, expected, got } => {
                write!(
                    f,
                    "{op}: shape mismatch, expected {expected:?}, got {got:?}"
                )
            }
            Error::Contract { op, reason } => write!(f, "{op}: {reason}"),
            Error::Config { field, reason } => write!(f, "invalid config `{field}`: {reason}"),
            Error::Unsupported(what) => write!(f, "unsupported operation: {what}"),
            Error::NonFinite { op } => write!(f, "{op}: non-finite value"),
        }
    }
}

impl core::error::Error for Error {}
