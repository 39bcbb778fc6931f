//! Error type shared across the crate.

use alloc::string::String;
use core::fmt;

/// Errors from tensor, diffusion, and data operations.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible; the message carries a dimension report.
    ShapeMismatch(String),
    /// An argument is outside its documented domain.
    InvalidArgument(String),
    /// A computation produced or would propagate non-finite values.
    NonFinite(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::ShapeMismatch(alloc::format!($($arg)*))
    };
}

macro_rules! arg_err {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(alloc::format!($($arg)*))
    };
}

pub(crate) use arg_err;
pub(crate) use shape_err;
