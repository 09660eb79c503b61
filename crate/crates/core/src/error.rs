use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure classes, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Solver,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed metadata in {path}: {message}")]
    Metadata { path: PathBuf, message: String },

    #[error("size mismatch: expected {expected} values, found {found}")]
    SizeMismatch { expected: usize, found: usize },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {context} at index {index}")]
    NonFinite { context: &'static str, index: usize },

    #[error("column {column} violates the abundance simplex: {detail}")]
    Infeasible { column: usize, detail: String },

    #[error("invalid library: {0}")]
    InvalidLibrary(String),

    #[error("invalid parameter `{name}`: {message}")]
    InvalidParameter { name: &'static str, message: String },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("clustering left an empty group after {retries} reseeds")]
    EmptyCluster { retries: usize },

    #[error("proximal scalar solve did not converge (residual {residual:.3e})")]
    ProxNonConvergence { residual: f64 },

    #[error("solver produced a non-finite iterate at iteration {iteration}")]
    SolverNan { iteration: usize },

    #[error("extraction round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("run {run}: {source}")]
    Run {
        run: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(name: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            message: message.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidParameter { .. } => ErrorClass::Config,
            Error::ProxNonConvergence { .. } | Error::SolverNan { .. } => ErrorClass::Solver,
            Error::Round { source, .. } | Error::Run { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }
}
