//! Error type shared across the crate.

use std::fmt;

/// Errors produced by tensor, mask, model and training operations.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A tensor was constructed or combined with incompatible dimensions.
    InvalidShape { context: &'static str, details: String },
    /// A keep/prune ratio fell outside its legal interval.
    InvalidRatio { value: f64 },
    /// A per-sample operation was asked for a batch index that does not exist.
    SampleOutOfRange { sample: usize, batch: usize },
    /// A model spec failed its dimension chain-check; `layer` is the offending index.
    SpecInvalid { layer: usize, reason: String },
    /// Prune-config block count does not match the model's block count.
    BlockMismatch { expected: usize, got: usize },
    /// A backward pass needed a mask that was never cached by a forward pass.
    MissingMask { layer: usize },
    /// Training produced a non-finite loss and aborted.
    NonFiniteLoss { epoch: usize, loss: f64 },
    /// A schedule was queried past its final step.
    ScheduleStep { step: usize, total: usize },
    /// A dataset file is malformed (truncated record, bad label byte, ...).
    DataFormat { reason: String },
    /// A required input file (checkpoint, model spec, dataset) is absent.
    MissingArtifact { path: String },
    /// Configuration file or flag validation failure.
    Config { reason: String },
    /// Underlying I/O failure, flattened to a message so the error stays `Clone`.
    Io { context: String, message: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidShape { context, details } => {
                write!(f, "invalid shape in {context}: {details}")
            }
            Self::InvalidRatio { value } => {
                write!(f, "keep ratio must lie in (0, 1], got {value}")
            }
            Self::SampleOutOfRange { sample, batch } => {
                write!(f, "sample index {sample} out of range for batch of {batch}")
            }
            Self::SpecInvalid { layer, reason } => {
                write!(f, "model spec invalid at layer {layer}: {reason}")
            }
            Self::BlockMismatch { expected, got } => {
                write!(f, "prune config lists {got} blocks, model has {expected}")
            }
            Self::MissingMask { layer } => {
                write!(f, "layer {layer} has no cached mask; run forward first")
            }
            Self::NonFiniteLoss { epoch, loss } => {
                write!(f, "non-finite loss {loss} at epoch {epoch}; aborting training")
            }
            Self::ScheduleStep { step, total } => {
                write!(f, "schedule step {step} exceeds total {total}")
            }
            Self::DataFormat { reason } => write!(f, "data format error: {reason}"),
            Self::MissingArtifact { path } => write!(f, "missing artifact: {path}"),
            Self::Config { reason } => write!(f, "config error: {reason}"),
            Self::Io { context, message } => write!(f, "io error ({context}): {message}"),
        }
    }
}

impl std::error::Error for Error {}

impl Error {
    pub fn io(context: impl Into<String>, err: std::io::Error) -> Self {
        Self::Io { context: context.into(), message: err.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
