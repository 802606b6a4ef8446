use thiserror::Error;

/// Errors raised by the flow library.
#[derive(Debug, Error)]
pub enum FlowError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("integration failed at step {step}: {reason}")]
    Integration { step: usize, reason: String },
    #[error("retraction step too large: q + step vanishes")]
    DegenerateRetraction,
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
}

impl FlowError {
    /// True for errors caused by bad inputs or configuration (as opposed to
    /// numerical breakdown during integration).
    pub fn is_usage(&self) -> bool {
        !matches!(
            self,
            FlowError::Numeric(_) | FlowError::Integration { .. } | FlowError::DegenerateRetraction
        )
    }
}

pub type Result<T> = std::result::Result<T, FlowError>;
