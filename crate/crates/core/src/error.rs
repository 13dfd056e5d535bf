use alloc::string::String;
use core::fmt;

/// Everything that can go wrong inside the numerical core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not conform for the named operation.
    Shape { op: &'static str, detail: String },
    /// A feature map cannot be tiled into tokens, or token geometry is inconsistent.
    Geometry(String),
    /// A kernel produced NaN or an infinity.
    NonFinite(&'static str),
    /// A configuration or call argument is outside its valid range.
    InvalidArgument(String),
    /// Misuse of the gradient tape.
    Tape(String),
    /// The training loss stopped being finite.
    Diverged { epoch: usize, step: usize },
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Error::Geometry(msg) => write!(f, "invalid geometry: {msg}"),
            Error::NonFinite(op) => write!(f, "non-finite value produced by {op}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Tape(msg) => write!(f, "tape error: {msg}"),
            Error::Diverged { epoch, step } => {
                write!(f, "training diverged (non-finite loss) at epoch {epoch}, step {step}")
            }
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}
