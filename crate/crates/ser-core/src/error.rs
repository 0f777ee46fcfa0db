//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any layer of the pipeline, from tensor shape checks up
/// to checkpoint parsing.
#[derive(Debug, Error)]
pub enum SerError {
    /// Tensor shapes are incompatible for an operation. Names the operation
    /// and the offending axis or extent.
    #[error("dimension mismatch in `{op}`: {detail}")]
    Dim { op: &'static str, detail: String },

    /// A structural configuration constraint is violated (divisibility,
    /// channel counts, invalid hyperparameter).
    #[error("configuration error: {0}")]
    Config(String),

    /// A sequence operation received zero timesteps.
    #[error("empty sequence passed to `{0}`")]
    EmptySequence(&'static str),

    /// An API contract was violated (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// WAV parsing failure.
    #[error("wav error: {0}")]
    Wav(#[from] WavError),

    /// Dataset / manifest level problem.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint or cache file could not be parsed.
    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: u64, detail: String },

    /// Training produced a non-finite loss; diagnostics attached.
    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr={lr:.3e}, lambda={lambda:.4})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        lr: f64,
        lambda: f64,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Distinct WAV parse failures, as required by the ingestion contract.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum WavError {
    #[error("malformed RIFF header")]
    BadRiffHeader,
    #[error("not a WAVE file")]
    NotWave,
    #[error("missing fmt chunk")]
    MissingFmt,
    #[error("unsupported codec: format tag {format}, {bits} bits")]
    UnsupportedCodec { format: u16, bits: u16 },
    #[error("missing data chunk")]
    MissingData,
    #[error("zero-length audio payload")]
    EmptyAudio,
    #[error("unexpected end of file")]
    UnexpectedEof,
    #[error("unsupported sample rate {0} (expected 16000)")]
    BadSampleRate(u32),
}

pub type Result<T> = std::result::Result<T, SerError>;
