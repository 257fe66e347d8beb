use std::fmt;

use crate::error::{Error, Result};
use crate::moe::MoeSaved;
use crate::tensor::Tensor;

/// Primitive that produced a tape entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    RmsNorm,
    Linear,
    Silu,
    Attention,
    Moe,
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(primitive_name(*self))
    }
}

/// Forward operands a primitive needs to run its VJP.
#[derive(Debug, Clone)]
pub enum Saved {
    RmsNorm { input: Tensor },
    Linear { input: Tensor },
    Silu { input: Tensor },
    Attention(AttentionSaved),
    Moe(Box<MoeSaved>),
}

/// Projected queries/keys/values and the attention probabilities `[B, H, S, S]`.
#[derive(Debug, Clone)]
pub struct AttentionSaved {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub probs: Tensor,
}

impl Saved {
    pub fn primitive(&self) -> Primitive {
        match self {
            Saved::RmsNorm { .. } => Primitive::RmsNorm,
            Saved::Linear { .. } => Primitive::Linear,
            Saved::Silu { .. } => Primitive::Silu,
            Saved::Attention(_) => Primitive::Attention,
            Saved::Moe(_) => Primitive::Moe,
        }
    }

    pub fn scalars(&self) -> usize {
        match self {
            Saved::RmsNorm { input } | Saved::Linear { input } | Saved::Silu { input } => {
                input.numel()
            }
            Saved::Attention(a) => a.q.numel() + a.k.numel() + a.v.numel() + a.probs.numel(),
            Saved::Moe(m) => m.scalars(),
        }
    }
}

/// LIFO record of forward operands. Forward kernels push, VJPs pop in reverse
/// order, so a tape is consumed exactly once.
#[derive(Debug, Clone, Default)]
pub struct GradTape {
    entries: Vec<Saved>,
    live: usize,
    peak: usize,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, saved: Saved) {
        self.live += saved.scalars();
        self.peak = self.peak.max(self.live);
        self.entries.push(saved);
    }

    /// Pop the most recent entry, which must come from `expected`.
    pub fn pop(&mut self, expected: Primitive) -> Result<Saved> {
        match self.entries.pop() {
            Some(saved) if saved.primitive() == expected => {
                self.live -= saved.scalars();
                Ok(saved)
            }
            Some(saved) => {
                let found = saved.primitive().to_string();
                self.entries.push(saved);
                Err(Error::StaleTape {
                    expected: primitive_name(expected),
                    found,
                })
            }
            None => Err(Error::StaleTape {
                expected: primitive_name(expected),
                found: "empty tape".into(),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Saved] {
        &self.entries
    }

    /// Scalars currently held.
    pub fn scalars(&self) -> usize {
        self.live
    }

    /// Largest number of scalars held at once.
    pub fn peak_scalars(&self) -> usize {
        self.peak
    }
}

fn primitive_name(p: Primitive) -> &'static str {
    match p {
        Primitive::RmsNorm => "rmsnorm",
        Primitive::Linear => "linear",
        Primitive::Silu => "silu",
        Primitive::Attention => "attention",
        Primitive::Moe => "moe",
    }
}

/// Push onto an optional tape.
pub(crate) fn record(tape: &mut Option<&mut GradTape>, saved: impl FnOnce() -> Saved) {
    if let Some(t) = tape.as_deref_mut() {
        t.push(saved());
    }
}
