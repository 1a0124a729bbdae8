//! Shared pieces of the approxflow command-line front end.

use std::path::Path;

pub mod compare;
pub mod report;
pub mod synth;

/// CLI-level errors, mapped onto exit codes by the binary:
/// 2 usage, 3 pipeline/type/data, 4 infeasible targets.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Engine(approxflow::Error),
    Io { path: String, message: String },
    Data(String),
}

impl CliError {
    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Engine(approxflow::Error::InvalidConfig(_)) => 2,
            CliError::Engine(approxflow::Error::InfeasibleTargets { .. }) => 4,
            _ => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage error: {msg}"),
            CliError::Engine(e) => write!(f, "{e}"),
            CliError::Io { path, message } => write!(f, "i/o error on {path}: {message}"),
            CliError::Data(msg) => write!(f, "data error: {msg}"),
        }
    }
}

impl From<approxflow::Error> for CliError {
    fn from(e: approxflow::Error) -> Self {
        CliError::Engine(e)
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io {
            path: "<stream>".into(),
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
