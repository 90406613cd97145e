use std::fmt;

/// Crate-wide error type.
///
/// `Validation` and `Parse` map to CLI exit code 1, `NonFinite` to exit
/// code 2 (numerical abort).
#[derive(Debug)]
pub enum Error {
    /// Invalid input data or arguments (bad edge endpoints, shrink requests,
    /// out-of-range indices, ...).
    Validation(String),
    /// A text input failed to parse.
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    /// Tensor or matrix shape mismatch.
    Shape {
        op: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    /// A gradient, loss, or parameter became NaN/inf; the run must abort.
    NonFinite(String),
    /// On-disk format problems (missing manifest, version mismatch, ...).
    Format(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Validation(msg) => write!(f, "validation error: {msg}"),
            Error::Parse {
                path,
                line,
                message,
            } => write!(f, "parse error in {path} at line {line}: {message}"),
            Error::Shape { op, expected, got } => write!(
                f,
                "shape mismatch in {op}: expected {}x{}, got {}x{}",
                expected.0, expected.1, got.0, got.1
            ),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
