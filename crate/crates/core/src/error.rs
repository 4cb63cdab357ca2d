//! Error types shared across the codec.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum CodecError {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Coordinate outside the valid range of a grid or schedule.
    #[error("coordinate error: {0}")]
    Coord(String),

    /// Invalid parameter value (non-positive scale, bad GOP length, ...).
    #[error("parameter error: {0}")]
    Param(String),

    /// Entropy-model causality violation: a prediction requested context
    /// that the decoder would not yet have.
    #[error("context error: {0}")]
    Context(String),

    /// Symbol outside the coder's alphabet.
    #[error("symbol error: {0}")]
    Symbol(String),

    /// Undecodable or exhausted entropy-coded stream.
    #[error("decode error: {0}")]
    Decode(String),

    /// Container magic bytes or field layout invalid.
    #[error("format error: {0}")]
    Format(String),

    /// Container version not supported by this build.
    #[error("version error: {0}")]
    Version(String),

    /// Checksum mismatch or truncated packet.
    #[error("corrupt stream: {0}")]
    Corrupt(String),

    /// Pipeline state missing (reference frame, latent level, ...).
    #[error("state error: {0}")]
    State(String),

    /// Pretraining diverged; carries the step of the last good checkpoint.
    #[error("training diverged at step {step}; last good checkpoint at step {last_good}")]
    Train { step: usize, last_good: usize },

    /// Per-frame overfitting failed twice (NaN loss after rollback).
    #[error("overfitting failed: {0}")]
    Overfit(String),

    /// Quality ranges of two RD curves do not overlap.
    #[error("range error: {0}")]
    Range(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CodecError>;

impl CodecError {
    /// Process exit code for the CLI: 2 format, 3 corrupt, 4 config/params.
    pub fn exit_code(&self) -> i32 {
        match self {
            CodecError::Format(_) | CodecError::Version(_) => 2,
            CodecError::Corrupt(_) | CodecError::Decode(_) => 3,
            _ => 4,
        }
    }
}
