use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: left is {}x{}, right is {}x{}", .lhs.0, .lhs.1, .rhs.0, .rhs.1)]
    DimensionMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("matrix data has length {len}, expected {rows}x{cols}")]
    BadShape { rows: usize, cols: usize, len: usize },

    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error(
        "matrix is not positive definite: factorization failed at pivot {pivot} \
         with jitter {jitter:e}; raise the ridge or jitter"
    )]
    NotPositiveDefinite { pivot: usize, jitter: f64 },

    #[error("matrix is not symmetric: max |S - S^T| = {asymmetry:e} exceeds {tolerance:e}")]
    NotSymmetric { asymmetry: f64, tolerance: f64 },

    #[error("label {value} at index {index} is out of range for {num_classes} classes")]
    LabelOutOfRange {
        index: usize,
        value: usize,
        num_classes: usize,
    },

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("invalid priors: {0}")]
    InvalidPriors(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("expected {expected} weights but got {found}")]
    WrongSolverKind {
        expected: &'static str,
        found: &'static str,
    },

    #[error("{}: {source}", .path.display())]
    Idx {
        path: PathBuf,
        #[source]
        source: crate::dataio::IdxError,
    },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {}: {reason}", .path.display())]
    Format { path: PathBuf, reason: String },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for failures of the numerical kernels, as opposed to bad input or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. } | Error::NotSymmetric { .. } | Error::NonFinite { .. }
        )
    }

    /// True for failures reading, parsing or using data files.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::Idx { .. }
                | Error::Io { .. }
                | Error::Format { .. }
                | Error::Csv(_)
                | Error::LabelOutOfRange { .. }
                | Error::EmptyClass(_)
        )
    }
}
