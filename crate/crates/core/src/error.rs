use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Input outside the domain of an operation (empty sequence, series too short, ...).
    #[error("{0}")]
    Domain(String),

    /// Invalid configuration or command-line request.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },

    /// A function handed to the finite-difference oracle returned a non-finite value.
    #[error("non-finite function value {value} while perturbing {param}[{index}]")]
    Evaluation {
        param: String,
        index: usize,
        value: f64,
    },

    /// Two gradient bundles cannot be compared.
    #[error("gradient bundles differ: {0}")]
    Comparison(String),

    /// Residual series was built from different base-model parameters.
    #[error("stale error series: built from {found}, current model is {expected}")]
    StaleErrorSeries { expected: String, found: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 1 usage/config, 2 data, 3 verification failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Comparison(_) | Error::Evaluation { .. } => 3,
            _ => 2,
        }
    }
}
