use alloc::string::String;
use core::fmt;

/// Errors raised by the algorithmic core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A caller-supplied argument is out of its domain (empty input, budget too large, ...).
    Argument(String),
    /// Input data violates a structural invariant (weights, trees, shapes, labels).
    Validation(String),
    /// An index points outside the addressed array.
    Index { index: usize, len: usize },
    /// A non-finite value or degenerate transform appeared during computation.
    Numeric(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Argument(m) => write!(f, "invalid argument: {m}"),
            Error::Validation(m) => write!(f, "validation failed: {m}"),
            Error::Index { index, len } => write!(f, "index {index} out of range for length {len}"),
            Error::Numeric(m) => write!(f, "numeric fault: {m}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
