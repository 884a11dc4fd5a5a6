//! Library side of the `sbfm` command-line harness: configuration, the
//! shared experiment machinery, and the CSV/SVG emitters. The binary in
//! `main.rs` is a thin clap wrapper over [`commands`].

pub mod commands;
pub mod config;
pub mod experiment;
pub mod report;
pub mod svg;

/// Error carrying the process exit code.
///
/// Exit codes: `2` unreadable config or dataset, `3` checkpoint or
/// architecture mismatch, `1` anything else (including failed sweep cells).
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn checkpoint(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }

    pub fn run(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for CliError {}

impl From<sbfm_core::Error> for CliError {
    fn from(e: sbfm_core::Error) -> Self {
        use sbfm_core::Error;
        let code = match &e {
            Error::Config(_) | Error::Ingest { .. } | Error::Io(_) => 2,
            Error::Checkpoint(_) => 3,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}
