use std::path::PathBuf;

use alphachain_core::backtest::BacktestError;
use alphachain_core::chains::ChainError;
use alphachain_core::combiner::CombinerError;
use alphachain_core::llm::LlmError;
use alphachain_core::panel::PanelError;
use alphachain_core::pool::PoolError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config field `{field}`: {reason}")]
    ConfigInvalid { field: String, reason: String },
    #[error("missing upstream artifact {}: run `{stage}` first", path.display())]
    UpstreamArtifactMissing { path: PathBuf, stage: &'static str },
    #[error("malformed artifact {}: {reason}", path.display())]
    ArtifactInvalid { path: PathBuf, reason: String },
    #[error("mining stopped early: {0}")]
    MiningAborted(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Combiner(#[from] CombinerError),
    #[error(transparent)]
    Backtest(#[from] BacktestError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Variant name printed in front of the message on stderr.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::ConfigInvalid { .. } => "ConfigInvalid",
            CliError::UpstreamArtifactMissing { .. } => "UpstreamArtifactMissing",
            CliError::ArtifactInvalid { .. } => "ArtifactInvalid",
            CliError::MiningAborted(_) => "MiningAborted",
            CliError::Llm(e) | CliError::Chain(ChainError::BackendFailure(e)) => match e {
                LlmError::AuthMissing(_) => "AuthMissing",
                LlmError::HttpStatus { .. } => "HttpStatus",
                LlmError::Timeout => "Timeout",
                LlmError::MalformedResponse(_) => "MalformedResponse",
                LlmError::RetriesExhausted { .. } => "RetriesExhausted",
                LlmError::Transport(_) => "Transport",
                LlmError::InvalidConfig(_) => "InvalidBackendConfig",
            },
            CliError::Panel(_) => "PanelError",
            CliError::Pool(_) => "PoolError",
            CliError::Chain(_) => "ChainError",
            CliError::Combiner(_) => "CombinerError",
            CliError::Backtest(_) => "BacktestError",
            CliError::Io(_) => "Io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ConfigInvalid { .. } => 2,
            CliError::UpstreamArtifactMissing { .. } => 3,
            _ => 1,
        }
    }
}
