use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Missing or malformed input: exit code 2.
    #[error("{0}")]
    Input(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("backtest truncated: {0}")]
    Truncated(String),
    #[error("no checkpoint given; pass --checkpoint or --baselines-only")]
    MissingCheckpoint,
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }

    pub fn internal(e: impl std::fmt::Display) -> Self {
        CliError::Internal(e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) | CliError::MissingCheckpoint => 2,
            CliError::Divergence(_) => 3,
            CliError::Truncated(_) => 4,
            CliError::Internal(_) => 1,
        }
    }
}
