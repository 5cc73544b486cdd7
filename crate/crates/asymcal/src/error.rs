//! Error type shared across the crate.
//!
//! Every fallible operation returns [`Result`]. Variants carry enough
//! context (indices, shapes, byte counts) to diagnose a failure without
//! re-running the computation.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// Operands must share a storage dtype.
    DtypeMismatch { op: &'static str },
    /// Zero-sized tensors are not representable in the container format.
    EmptyTensor { rows: usize, cols: usize },
    /// Tensor container violation (bad magic, version, rank, byte count).
    Format(String),
    Io(std::io::Error),
    /// Cholesky factorization hit a non-positive pivot.
    NotSpd { pivot: usize, value: f64 },
    /// Gaussian elimination asked to pivot on a zero diagonal entry.
    ZeroPivot { index: usize },
    /// Input is structurally unusable (all-zero calibration data, empty grid).
    DegenerateInput(String),
    /// A configuration value is outside its documented domain.
    InvalidConfig(String),
    /// Calibration produced a non-finite value in the named column.
    NanDetected { column: usize },
    /// A brute-force oracle was asked to exceed its size cap.
    SizeCap { limit: usize, got: usize },
    /// A lower-level error tagged with where in a model walk it happened.
    Annotated { context: String, source: Box<Error> },
}

impl Error {
    /// Wraps the error with positional context ("block 2, layer fc1").
    pub fn annotate(self, context: impl Into<String>) -> Error {
        Error::Annotated {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, unwrapping any annotation layers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Annotated { source, .. } => source.root(),
            other => other,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => write!(
                f,
                "{op}: shape mismatch {}x{} vs {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Error::DtypeMismatch { op } => write!(f, "{op}: operand dtypes differ"),
            Error::EmptyTensor { rows, cols } => {
                write!(f, "empty tensor {rows}x{cols} is unsupported")
            }
            Error::Format(msg) => write!(f, "tensor container: {msg}"),
            Error::Io(err) => write!(f, "io: {err}"),
            Error::NotSpd { pivot, value } => write!(
                f,
                "matrix is not positive definite: pivot {pivot} = {value:e}"
            ),
            Error::ZeroPivot { index } => {
                write!(f, "cannot eliminate index {index}: zero diagonal entry")
            }
            Error::DegenerateInput(msg) => write!(f, "degenerate input: {msg}"),
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::NanDetected { column } => {
                write!(f, "non-finite value while calibrating column {column}")
            }
            Error::SizeCap { limit, got } => {
                write!(f, "oracle size cap exceeded: {got} > {limit}")
            }
            Error::Annotated { context, source } => write!(f, "{context}: {source}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            Error::Annotated { source, .. } => Some(source.as_ref()),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}
