use std::path::PathBuf;

use thiserror::Error;

/// Failures of the command-line layer, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("solver failure: {0}")]
    Solver(hjb_core::Error),
    #[error("grid mismatch: reference and candidate grids differ (use --resample to interpolate)")]
    GridMismatch,
    #[error("scenario mismatch: {0}")]
    Scenario(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{context} {path}: {source}")]
    Io {
        context: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => 1,
            CliError::Solver(_) => 2,
            CliError::GridMismatch => 3,
            CliError::Scenario(_) => 4,
            CliError::Format(_) => 5,
        }
    }

    pub fn io(context: &'static str, path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { context, path, source }
    }
}

/// Problems reading a solution file.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("unsupported solution format version {found} (expected {expected})")]
    FormatVersionMismatch { found: u32, expected: u32 },
    #[error("corrupt solution file: {0}")]
    CorruptFile(String),
}
