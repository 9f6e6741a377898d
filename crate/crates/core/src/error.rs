use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A matrix that should be positive definite failed to factor.
    #[error("numerical degeneracy: {0}")]
    NumericalDegeneracy(String),

    /// Zero spectral gap where a strictly decreasing spectrum is required.
    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    #[error("symmetric eigensolver did not converge on a {dim}x{dim} matrix{}", dump_note(.dump))]
    Convergence { dim: usize, dump: Option<PathBuf> },

    #[error("internal numeric error: {0}")]
    Internal(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn dump_note(dump: &Option<PathBuf>) -> String {
    match dump {
        Some(path) => format!(" (matrix dumped to {})", path.display()),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
