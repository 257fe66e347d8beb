//! Differentiable layer primitives, each with a forward pass and an explicit
//! vector-Jacobian product.
//!
//! Forward functions take an optional [`GradTape`]; when present they push the
//! operands their VJP needs. VJPs pop those entries in reverse order.

mod attention;
mod linear;
mod mlp;
mod norm;
mod tape;

pub use attention::{cross_attention_fwd, cross_attention_vjp, cross_attention_weights, AttentionParams};
pub use linear::{linear_fwd, linear_vjp, LinearParams};
pub use mlp::{mlp_fwd, mlp_vjp, silu_fwd, silu_vjp, MlpParams};
pub use norm::{rmsnorm_fwd, rmsnorm_vjp, NormParams};
pub use tape::{AttentionSaved, GradTape, Primitive, Saved};
pub(crate) use tape::record;
