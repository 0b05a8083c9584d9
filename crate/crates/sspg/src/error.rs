//! Error type shared by every subsystem.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SspgError {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: String,
        got: String,
    },

    /// A caller violated an API contract (non-scalar backward root,
    /// gradient keys out of sync with parameters, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Chain diagnostics need at least two samples per chain.
    #[error("insufficient samples: need {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    /// Chain diagnostics need at least two parallel chains.
    #[error("insufficient chains: need {needed}, got {got}")]
    InsufficientChains { needed: usize, got: usize },

    /// Within-chain covariance is singular beyond the regularization floor.
    #[error("degenerate within-chain covariance in dimensions {dims:?}")]
    DegenerateCovariance { dims: Vec<usize> },

    /// A NaN or infinity surfaced where a finite value is required.
    #[error("non-finite value in {context}: {details}")]
    NonFinite { context: String, details: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SspgError>;

impl SspgError {
    pub fn dimension(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        SspgError::Dimension {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn non_finite(context: impl Into<String>, details: impl Into<String>) -> Self {
        SspgError::NonFinite {
            context: context.into(),
            details: details.into(),
        }
    }

    /// Process exit code for the CLI: 2 for bad configs, 3 for numeric
    /// failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            SspgError::Config(_) => 2,
            SspgError::NonFinite { .. } => 3,
            _ => 1,
        }
    }
}
