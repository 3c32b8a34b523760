use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifacts:\n{}", list(.0))]
    MissingArtifacts(Vec<PathBuf>),
    #[error("{}", .0.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("; "))]
    SelfTest(Vec<String>),
    #[error(transparent)]
    Core(#[from] msr_core::Error),
}

fn list(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| format!("  {}", p.display())).collect::<Vec<_>>().join("\n")
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_MISSING: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        use msr_core::Error as E;
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::MissingArtifacts(_) | CliError::Core(E::Missing(_)) => EXIT_MISSING,
            CliError::SelfTest(_) | CliError::Core(E::NonFinite { .. }) => EXIT_NUMERIC,
            CliError::Core(_) => EXIT_OTHER,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}
