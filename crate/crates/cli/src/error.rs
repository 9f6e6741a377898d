use std::fmt;

use covrecon::study::StageError;
use covrecon::Error;

/// Failure classes with distinct exit codes.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
    Infeasible(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Infeasible(_) => 4,
        }
    }

    fn classify(err: &Error, msg: String) -> Self {
        match err {
            Error::InvalidArgument(_) | Error::Parse(_) => CliError::Config(msg),
            Error::Io(_) => CliError::Io(msg),
            Error::NumericalDegeneracy(_)
            | Error::DegenerateSpectrum(_)
            | Error::Convergence { .. }
            | Error::Internal(_) => CliError::Numeric(msg),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Infeasible(m) => write!(f, "infeasible plan: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        CliError::classify(&e, msg)
    }
}

impl From<StageError> for CliError {
    fn from(e: StageError) -> Self {
        let msg = e.to_string();
        CliError::classify(&e.source, msg)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
