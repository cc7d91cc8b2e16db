use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the echo cancellation pipeline.
#[derive(Debug, Error)]
pub enum AecError {
    #[error("input too short: need at least {needed} samples, got {got}")]
    InputTooShort { needed: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    RateMismatch(u32, u32),

    #[error("length mismatch: {0} vs {1} samples")]
    LengthMismatch(usize, usize),

    #[error("no signal: input is silent")]
    NoSignal,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("adaptive filter diverged")]
    Diverged,

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("wav {path}: {msg}")]
    Wav { path: PathBuf, msg: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = AecError> = std::result::Result<T, E>;

impl AecError {
    /// Stable short name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            AecError::InputTooShort { .. } => "input_too_short",
            AecError::InvalidConfig(_) => "invalid_config",
            AecError::ShapeMismatch { .. } => "shape_mismatch",
            AecError::RateMismatch(..) => "rate_mismatch",
            AecError::LengthMismatch(..) => "length_mismatch",
            AecError::NoSignal => "no_signal",
            AecError::NonFinite(_) => "non_finite",
            AecError::Diverged => "diverged",
            AecError::Autodiff(_) => "autodiff",
            AecError::Wav { .. } => "wav",
            AecError::Parse(_) => "parse",
            AecError::EmptyDataset => "empty_dataset",
            AecError::Io { .. } => "io",
        }
    }

    /// Stable positive code of the variant.
    pub fn code(&self) -> i32 {
        match self {
            AecError::InputTooShort { .. } => 1,
            AecError::InvalidConfig(_) => 2,
            AecError::ShapeMismatch { .. } => 3,
            AecError::RateMismatch(..) => 4,
            AecError::LengthMismatch(..) => 5,
            AecError::NoSignal => 6,
            AecError::NonFinite(_) => 7,
            AecError::Diverged => 8,
            AecError::Autodiff(_) => 9,
            AecError::Wav { .. } => 10,
            AecError::Parse(_) => 11,
            AecError::EmptyDataset => 12,
            AecError::Io { .. } => 13,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AecError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        AecError::InvalidConfig(msg.into())
    }
}
