//! File formats, JSON reports and the `cdfsod` command-line harness around
//! [`cdfsod_core`].

pub mod cli;
pub mod io;
pub mod report;

use thiserror::Error;

pub use cli::run;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    File(#[from] io::IoError),
    #[error(transparent)]
    Core(#[from] cdfsod_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Invalid(String),
}

impl CliError {
    /// 2 for file-system failures, 1 for everything the user can fix in
    /// their inputs or flags.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::File(e) if e.is_io() => 2,
            _ => 1,
        }
    }
}
