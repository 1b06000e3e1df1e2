use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("codebook error: {0}")]
    Codebook(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("patching error: frame {height}x{width} is not divisible by patch edge {patch}")]
    Patching {
        height: usize,
        width: usize,
        patch: usize,
    },

    #[error("sequence too short: {0}")]
    SequenceTooShort(String),

    #[error("infeasible alignment: {0}")]
    InfeasibleAlignment(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("checkpoint incompatibility: {0}")]
    CheckpointIncompatible(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("key not found: {0}")]
    NotFound(String),

    #[error("missing artifact {}", .0.display())]
    Dependency(PathBuf),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code printed by the CLI in front of every error.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "E_DIMENSION",
            Error::EmptyInput(_) => "E_EMPTY_INPUT",
            Error::Contract(_) => "E_CONTRACT",
            Error::Divergence(_) => "E_DIVERGENCE",
            Error::Codebook(_) => "E_CODEBOOK",
            Error::DegenerateInput(_) => "E_DEGENERATE",
            Error::Parameter(_) => "E_PARAMETER",
            Error::Patching { .. } => "E_PATCHING",
            Error::SequenceTooShort(_) => "E_TOO_SHORT",
            Error::InfeasibleAlignment(_) => "E_INFEASIBLE",
            Error::InsufficientData(_) => "E_INSUFFICIENT_DATA",
            Error::CheckpointIncompatible(_) => "E_CHECKPOINT",
            Error::UndefinedMetric(_) => "E_METRIC",
            Error::Format(_) => "E_FORMAT",
            Error::NotFound(_) => "E_NOT_FOUND",
            Error::Dependency(_) => "E_DEPENDENCY",
            Error::Config { .. } => "E_CONFIG",
            Error::Io(_) => "E_IO",
            Error::Json(_) => "E_JSON",
        }
    }
}

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
