use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("integrity error at row {row}: {message}")]
    Integrity { row: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("segmentation error: {0}")]
    Segmentation(String),

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("capacity interpolation for cycle {cycle} requires extrapolation outside RPT span [{first}, {last}]")]
    Extrapolation { cycle: u32, first: u32, last: u32 },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("design matrix is rank deficient; collinear columns: {}", columns.join(", "))]
    Singular { columns: Vec<String> },

    #[error("fit did not converge after {iterations} iterations (last coefficient change {last_delta:.3e})")]
    NoConvergence {
        iterations: usize,
        last_delta: f64,
        trace: Vec<f64>,
    },

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad user input (missing files, malformed
    /// configuration or schema), as opposed to failures during computation.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Parse { .. }
            | Error::Schema(_)
            | Error::Config(_)
            | Error::Format { .. } => true,
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            _ => false,
        }
    }
}
