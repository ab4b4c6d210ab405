//! Error type shared across the crate.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Mismatched vector/matrix dimensions on an operation input.
    Dimension { what: &'static str, expected: usize, got: usize },
    /// An idiosyncratic scale entry is (numerically) zero, so Sigma is singular.
    SingularScale { index: usize, value: f64 },
    /// A linear solve or other numerical step failed.
    Numerical(String),
    /// A callback produced a non-finite value.
    NonFinite { what: &'static str, index: usize },
    /// Malformed input data (line is 1-based, counting the header).
    Data { line: Option<usize>, msg: String },
    /// Invalid configuration (empty groups, bad layer sizes, ...).
    Config(String),
    /// The optimizer produced a non-finite iterate.
    Divergence { iteration: usize, grad_norm: f64, natgrad_norm: f64 },
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { what, expected, got } => {
                write!(f, "dimension mismatch for {what}: expected {expected}, got {got}")
            }
            Error::SingularScale { index, value } => {
                write!(f, "idiosyncratic scale c[{index}] = {value:e} is too close to zero")
            }
            Error::Numerical(msg) => write!(f, "numerical error: {msg}"),
            Error::NonFinite { what, index } => {
                write!(f, "non-finite {what} at index {index}")
            }
            Error::Data { line: Some(line), msg } => write!(f, "data error at line {line}: {msg}"),
            Error::Data { line: None, msg } => write!(f, "data error: {msg}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Divergence { iteration, grad_norm, natgrad_norm } => write!(
                f,
                "divergence at iteration {iteration}: non-finite iterate \
                 (gradient norm {grad_norm:e}, natural gradient norm {natgrad_norm:e})"
            ),
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
