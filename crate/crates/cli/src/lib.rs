//! Command-line front end: corpus generation, training, evaluation,
//! gradient checks and loss-mode ablations.

pub mod ablate;
pub mod checkpoint;
pub mod commands;
pub mod config;

pub use commands::run_command;
pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Core(#[from] dail_core::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 1 for usage errors, 2 for everything that fails at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}
