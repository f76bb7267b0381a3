use std::path::PathBuf;

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("cannot read config {path}: {source}")]
    MissingConfig { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Core(#[from] semidiff_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("worker pool: {0}")]
    Pool(String),
}

/// Process exit codes of the command-line front end.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INVALID_CONFIG: i32 = 2;
    pub const MISSING_CONFIG: i32 = 3;
    pub const RUNTIME: i32 = 4;
}

/// Machine-readable error report printed on stderr.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub error: &'static str,
    pub exit_code: i32,
    pub message: String,
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> LabError {
        let path = path.into();
        move |source| LabError::Io { path, source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> LabError {
        LabError::Format { path: path.into(), message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::MissingConfig { .. } => exit::MISSING_CONFIG,
            LabError::InvalidConfig(_) => exit::INVALID_CONFIG,
            LabError::Core(e) if is_config_error(e) => exit::INVALID_CONFIG,
            _ => exit::RUNTIME,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            exit::MISSING_CONFIG => "missing_config",
            exit::INVALID_CONFIG => "invalid_config",
            _ => "runtime",
        }
    }

    pub fn report(&self) -> ErrorReport {
        ErrorReport { error: self.kind(), exit_code: self.exit_code(), message: self.to_string() }
    }
}

fn is_config_error(e: &semidiff_core::Error) -> bool {
    use semidiff_core::Error as E;
    match e {
        E::Stage { stage: "validate", .. } => true,
        E::InvalidConfig(_)
        | E::InvalidEnv(_)
        | E::InvalidSampler(_)
        | E::InvalidOptimizer(_)
        | E::InvalidScalarization(_)
        | E::InvalidModelSpec(_)
        | E::InvalidSchedule(_)
        | E::InvalidTask(_) => true,
        _ => false,
    }
}
