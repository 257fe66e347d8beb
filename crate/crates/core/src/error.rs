use std::fmt;

/// Errors raised anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("precision mismatch in {op}")]
    PrecisionMismatch { op: &'static str },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("softmax over an empty axis")]
    EmptyAxis,

    #[error("feature width {0} is odd; reversible streams need an even width")]
    OddWidth(usize),

    #[error("d_model {d_model} is not divisible by n_heads {n_heads}")]
    HeadDivisibility { d_model: usize, n_heads: usize },

    #[error("top_k {top_k} must be in 1..={n_experts}")]
    TopK { top_k: usize, n_experts: usize },

    #[error("stale tape: expected a {expected} entry, found {found}")]
    StaleTape {
        expected: &'static str,
        found: String,
    },

    #[error("reconstruction failed{ctx}: residual {error:e} exceeds tolerance {tolerance:e}")]
    Reconstruction {
        ctx: ReconContext,
        error: f64,
        tolerance: f64,
    },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("trainable mask does not cover parameter `{0}`")]
    MaskIncomplete(String),

    #[error("non-finite gradient for `{0}`; optimizer step rejected")]
    NonFiniteGradient(String),

    #[error("checkpoint `{0}` not found")]
    CheckpointMissing(std::path::PathBuf),

    #[error("checkpoint checksum mismatch (file truncated or corrupt)")]
    ChecksumMismatch,

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("checkpoint tensor `{name}` has shape {found:?}, config expects {expected:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Attach the failing layer to a reconstruction error; other errors pass through.
    pub fn at_layer(self, layer: usize) -> Self {
        match self {
            Error::Reconstruction {
                mut ctx,
                error,
                tolerance,
            } => {
                ctx.layer = Some(layer);
                Error::Reconstruction {
                    ctx,
                    error,
                    tolerance,
                }
            }
            other => other,
        }
    }

    /// Attach the training step to a reconstruction error.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            Error::Reconstruction {
                mut ctx,
                error,
                tolerance,
            } => {
                ctx.step = Some(step);
                Error::Reconstruction {
                    ctx,
                    error,
                    tolerance,
                }
            }
            other => other,
        }
    }
}

/// Where a reconstruction failure happened, when known.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReconContext {
    pub layer: Option<usize>,
    pub step: Option<usize>,
}

impl fmt::Display for ReconContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(layer) = self.layer {
            write!(f, " at layer {layer}")?;
        }
        if let Some(step) = self.step {
            write!(f, " (step {step})")?;
        }
        Ok(())
    }
}
