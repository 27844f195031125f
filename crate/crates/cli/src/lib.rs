//! File formats, configuration and subcommands behind the `rigrefine`
//! binary.
//!
//! Exit codes: 0 on success, 2 for any input or configuration problem, 3
//! when refinement diverges.

pub mod commands;
pub mod config;
pub mod formats;
pub mod report;

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Input { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    /// Refined and ground-truth files do not describe the same frames or cameras.
    #[error("mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Core(#[from] rigrefine_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(rigrefine_core::Error::Diverged { .. }) => EXIT_DIVERGED,
            _ => EXIT_INPUT,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
