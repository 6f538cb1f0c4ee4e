//! Library backing the `fedftn` experiment runner. The binary in
//! `main.rs` is a thin argument-parsing shell over the command functions
//! here, which keeps every behaviour reachable from integration tests.

pub mod artifacts;
pub mod chart;
pub mod commands;
pub mod config;

use std::fmt;

/// Errors surfaced to the operator, each mapped to a stable process exit
/// code so scripts can branch on failure families.
#[derive(Debug)]
pub enum CliError {
    /// Invalid or unreadable configuration (exit 2).
    Config(String),
    /// Transport setup or mid-run connection failure (exit 3).
    Transport(String),
    /// Checkpoint does not match the supplied config (exit 4).
    Mismatch(String),
    /// Runs are not comparable, e.g. different dataset seeds (exit 5).
    Incomparable(String),
    /// Anything else: I/O, internal invariant failures (exit 1).
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Transport(_) => 3,
            CliError::Mismatch(_) => 4,
            CliError::Incomparable(_) => 5,
        }
    }

    pub fn other(e: impl fmt::Display) -> Self {
        CliError::Other(e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m)
            | CliError::Transport(m)
            | CliError::Mismatch(m)
            | CliError::Incomparable(m)
            | CliError::Other(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<fedftn_core::Error> for CliError {
    fn from(e: fedftn_core::Error) -> Self {
        match &e {
            fedftn_core::Error::Config(_) => CliError::Config(e.to_string()),
            fedftn_core::Error::Transport(_) => CliError::Transport(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
