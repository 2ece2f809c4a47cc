//! Library side of the `cdl` command: config resolution, the five commands
//! and the diagnostic plots. The binary in `main.rs` only parses arguments.

use std::path::{Path, PathBuf};

pub mod commands;
pub mod plots;
pub mod run_config;

pub use run_config::{Overrides, RunConfig, RunConfigFile};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments, unreadable or invalid configuration, missing inputs.
    #[error("{0}")]
    Config(String),
    #[error("no training log at {}", .0.display())]
    MissingLogs(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Plot(String),
    #[error(transparent)]
    Core(#[from] cdl::Error),
}

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    /// 1 for usage and configuration problems, 2 for failures while working.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::MissingLogs(_) => 1,
            _ => 2,
        }
    }
}
