//! Error types shared across the crate.

use std::fmt;

/// Broad failure class, used by callers (e.g. the CLI) to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Rejected input: dimension mismatches, out-of-range arguments,
    /// malformed or inconsistent files.
    Input,
    /// Numeric failure: non-convergence, loss of symmetry, indefinite
    /// covariance.
    Numeric,
}

#[derive(Debug)]
pub enum Error {
    /// Shapes or dimensions do not line up.
    DimMismatch {
        what: &'static str,
        expected: String,
        actual: String,
    },
    /// An argument is outside its documented domain.
    InvalidArgument { what: &'static str, message: String },
    /// A matrix required to be symmetric is not, within tolerance.
    NotSymmetric { max_asymmetry: f64 },
    /// A covariance matrix has an eigenvalue below the PSD tolerance.
    NotPositiveSemidefinite { min_eigenvalue: f64 },
    /// Iterative solver hit its iteration cap.
    NoConvergence { residual: f64, sweeps: usize },
    /// The linear constraint system produced a nonpositive coefficient.
    InfeasibleCoefficients { alpha2: f64, alpha4: f64 },
    /// A weight file could not be parsed. `offset` is the byte position
    /// at which the problem was detected.
    Parse { offset: u64, message: String },
    /// A weight file parsed but violates the schema (missing tensor,
    /// shape mismatch, overlapping offsets, ...).
    Schema { message: String },
    Io(std::io::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::DimMismatch { .. }
            | Error::InvalidArgument { .. }
            | Error::Parse { .. }
            | Error::Schema { .. }
            | Error::Io(_) => ErrorKind::Input,
            Error::NotSymmetric { .. }
            | Error::NotPositiveSemidefinite { .. }
            | Error::NoConvergence { .. }
            | Error::InfeasibleCoefficients { .. } => ErrorKind::Numeric,
        }
    }

    pub fn dim(what: &'static str, expected: impl fmt::Display, actual: impl fmt::Display) -> Self {
        Error::DimMismatch {
            what,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn arg(what: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidArgument {
            what,
            message: message.into(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimMismatch {
                what,
                expected,
                actual,
            } => write!(f, "{what}: dimension mismatch (expected {expected}, got {actual})"),
            Error::InvalidArgument { what, message } => write!(f, "{what}: {message}"),
            Error::NotSymmetric { max_asymmetry } => {
                write!(f, "matrix is not symmetric (max |A - A^T| element = {max_asymmetry:e})")
            }
            Error::NotPositiveSemidefinite { min_eigenvalue } => {
                write!(f, "matrix is not positive semidefinite (min eigenvalue = {min_eigenvalue:e})")
            }
            Error::NoConvergence { residual, sweeps } => {
                write!(f, "eigensolver did not converge after {sweeps} sweeps (off-diagonal residual = {residual:e})")
            }
            Error::InfeasibleCoefficients { alpha2, alpha4 } => {
                write!(f, "constraint system yields nonpositive coefficient (alpha2 = {alpha2}, alpha4 = {alpha4})")
            }
            Error::Parse { offset, message } => {
                write!(f, "weight file parse error at byte {offset}: {message}")
            }
            Error::Schema { message } => write!(f, "weight file schema error: {message}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
