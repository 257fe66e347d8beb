//! The reversible block.
//!
//! The hidden state is split along features into a left and right stream.
//! The coupled forward is
//!
//! ```text
//! Y1 = X1 + Attn(X1, X2)        (paper coupling; strict coupling uses Attn(X2, X2))
//! Y2 = X2 + Mlp(Y1)
//! ```
//!
//! where `Attn(a, b) = P_down(Attention(q = P_up_q(Norm(a)), kv = P_up_kv(Norm(b))))`
//! and `Mlp(y) = P_down(MoE(P_up(Norm(y))))`. The inverse recovers `X2`
//! exactly from `Y2 - Mlp(Y1)`. Under strict coupling `X1 = Y1 - Attn(X2, X2)`
//! is exact too; under the paper coupling `X1` appears on both sides and is
//! recovered by fixed-point iteration seeded with `Y1`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, ReconContext, Result};
use crate::kernels::{
    cross_attention_fwd, cross_attention_vjp, linear_fwd, linear_vjp, rmsnorm_fwd, rmsnorm_vjp,
    AttentionParams, GradTape, LinearParams, NormParams,
};
use crate::moe::{moe_fwd, moe_vjp, ExpertBank, RouterParams};
use crate::tensor::{Precision, Rng, Tensor};

/// The two half-width streams of a reversible block.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamPair {
    pub left: Tensor,
    pub right: Tensor,
}

impl StreamPair {
    pub fn new(left: Tensor, right: Tensor) -> Result<Self> {
        if left.shape() != right.shape() {
            return Err(Error::ShapeMismatch {
                op: "stream pair",
                lhs: left.shape().to_vec(),
                rhs: right.shape().to_vec(),
            });
        }
        if left.precision() != right.precision() {
            return Err(Error::PrecisionMismatch { op: "stream pair" });
        }
        Ok(Self { left, right })
    }

    pub fn numel(&self) -> usize {
        self.left.numel() + self.right.numel()
    }

    pub fn max_abs(&self) -> f64 {
        self.left.max_abs().max(self.right.max_abs())
    }

    pub fn max_abs_diff(&self, other: &StreamPair) -> Result<f64> {
        Ok(self
            .left
            .max_abs_diff(&other.left)?
            .max(self.right.max_abs_diff(&other.right)?))
    }

    pub fn bitwise_eq(&self, other: &StreamPair) -> bool {
        self.left.bitwise_eq(&other.left) && self.right.bitwise_eq(&other.right)
    }

    pub fn zeros_like(&self) -> StreamPair {
        StreamPair {
            left: self.left.zeros_like(),
            right: self.right.zeros_like(),
        }
    }
}

/// Split `h` along the last axis into `[0, d/2)` and `[d/2, d)`.
pub fn split(h: &Tensor) -> Result<StreamPair> {
    let d = h.last_dim();
    if !d.is_multiple_of(2) || d < 2 {
        return Err(Error::OddWidth(d));
    }
    let (left, right) = h.split_last(d / 2)?;
    Ok(StreamPair { left, right })
}

pub fn concat(p: &StreamPair) -> Result<Tensor> {
    p.left.concat_last(&p.right)
}

/// Which stream feeds the attention query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CouplingVariant {
    /// Query from the left stream, keys/values from the right. Inverse is a fixed point.
    #[serde(rename = "paper")]
    PaperAsymmetric,
    /// Query and keys/values from the right stream. Inverse is exact.
    #[serde(rename = "strict")]
    StrictRevnet,
}

impl CouplingVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            CouplingVariant::PaperAsymmetric => "paper",
            CouplingVariant::StrictRevnet => "strict",
        }
    }
}

impl fmt::Display for CouplingVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CouplingVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" | "paper_asymmetric" => Ok(CouplingVariant::PaperAsymmetric),
            "strict" | "strict_revnet" => Ok(CouplingVariant::StrictRevnet),
            other => Err(Error::config(
                "coupling",
                format!("expected `paper` or `strict`, got `{other}`"),
            )),
        }
    }
}

/// Projections around the attention module: one up-projection for the query
/// source, one for the key/value source, one down-projection on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionAdapters {
    /// `[d x d/2]`
    pub up_q: LinearParams,
    /// `[d x d/2]`
    pub up_kv: LinearParams,
    /// `[d/2 x d]`
    pub down: LinearParams,
}

/// Up/down projection pair around the MoE module.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair {
    /// `[d x d/2]`
    pub up: LinearParams,
    /// `[d/2 x d]`
    pub down: LinearParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub norm_x1: NormParams,
    pub norm_x2: NormParams,
    pub norm_y1: NormParams,
    pub attn: AttentionParams,
    pub attn_adapters: AttentionAdapters,
    pub mlp_adapters: AdapterPair,
    pub router: RouterParams,
    pub experts: ExpertBank,
}

/// Architectural sizes of one block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockDims {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub d_ff: usize,
    pub causal: bool,
    pub norm_eps: f64,
}

impl BlockParams {
    /// Backbone weights are random; up-projections ~ N(0, 1/d); down-projections are zero
    /// so the block starts as the identity map. Routers start frozen.
    pub fn init(dims: &BlockDims, precision: Precision, rng: &mut Rng) -> Result<Self> {
        let d = dims.d_model;
        if !d.is_multiple_of(2) || d < 2 {
            return Err(Error::OddWidth(d));
        }
        let h = d / 2;
        let up_std = (d as f64).powf(-0.5);
        Ok(Self {
            norm_x1: NormParams::ones(h, dims.norm_eps, precision)?,
            norm_x2: NormParams::ones(h, dims.norm_eps, precision)?,
            norm_y1: NormParams::ones(h, dims.norm_eps, precision)?,
            attn: AttentionParams::randn(d, dims.n_heads, dims.causal, precision, rng)?,
            attn_adapters: AttentionAdapters {
                up_q: LinearParams::randn(d, h, up_std, precision, rng)?,
                up_kv: LinearParams::randn(d, h, up_std, precision, rng)?,
                down: LinearParams::zeros(h, d, precision)?,
            },
            mlp_adapters: AdapterPair {
                up: LinearParams::randn(d, h, up_std, precision, rng)?,
                down: LinearParams::zeros(h, d, precision)?,
            },
            router: RouterParams::randn(dims.n_experts, d, dims.top_k, true, precision, rng)?,
            experts: ExpertBank::randn(dims.n_experts, d, dims.d_ff, precision, rng)?,
        })
    }

    /// Replace both down-projections with N(0, std^2) draws.
    pub fn randomize_down_projections(&mut self, std: f64, rng: &mut Rng) -> Result<()> {
        let p = self.attn_adapters.down.weight.precision();
        let (h, d) = (self.d_half(), self.d_model());
        self.attn_adapters.down = LinearParams::randn(h, d, std, p, rng)?;
        self.mlp_adapters.down = LinearParams::randn(h, d, std, p, rng)?;
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.attn.d_model()
    }

    pub fn d_half(&self) -> usize {
        self.d_model() / 2
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            norm_x1: self.norm_x1.zeros_like(),
            norm_x2: self.norm_x2.zeros_like(),
            norm_y1: self.norm_y1.zeros_like(),
            attn: self.attn.zeros_like(),
            attn_adapters: AttentionAdapters {
                up_q: self.attn_adapters.up_q.zeros_like(),
                up_kv: self.attn_adapters.up_kv.zeros_like(),
                down: self.attn_adapters.down.zeros_like(),
            },
            mlp_adapters: AdapterPair {
                up: self.mlp_adapters.up.zeros_like(),
                down: self.mlp_adapters.down.zeros_like(),
            },
            router: self.router.zeros_like(),
            experts: self.experts.zeros_like(),
        }
    }
}

/// `P_down(Attention(q = P_up_q(Norm_x1(x1_like)), kv = P_up_kv(Norm_x2(x2_like))))`.
pub fn branch_attn(
    x1_like: &Tensor,
    x2_like: &Tensor,
    p: &BlockParams,
    mut tape: Option<&mut GradTape>,
) -> Result<Tensor> {
    let n1 = rmsnorm_fwd(x1_like, &p.norm_x1, tape.as_deref_mut())?;
    let q = linear_fwd(&n1, &p.attn_adapters.up_q, tape.as_deref_mut())?;
    let n2 = rmsnorm_fwd(x2_like, &p.norm_x2, tape.as_deref_mut())?;
    let kv = linear_fwd(&n2, &p.attn_adapters.up_kv, tape.as_deref_mut())?;
    let a = cross_attention_fwd(&q, &kv, &p.attn, tape.as_deref_mut())?;
    linear_fwd(&a, &p.attn_adapters.down, tape)
}

/// Gradients w.r.t. both branch inputs; parameter grads are written into `acc`.
pub fn branch_attn_vjp(
    p: &BlockParams,
    tape: &mut GradTape,
    grad_out: &Tensor,
    acc: &mut BlockParams,
) -> Result<(Tensor, Tensor)> {
    let (da, g_down) = linear_vjp(&p.attn_adapters.down, tape, grad_out)?;
    let (dq, dkv, g_attn) = cross_attention_vjp(&p.attn, tape, &da)?;
    let (dn2, g_up_kv) = linear_vjp(&p.attn_adapters.up_kv, tape, &dkv)?;
    let (dx2, g_n2) = rmsnorm_vjp(&p.norm_x2, tape, &dn2)?;
    let (dn1, g_up_q) = linear_vjp(&p.attn_adapters.up_q, tape, &dq)?;
    let (dx1, g_n1) = rmsnorm_vjp(&p.norm_x1, tape, &dn1)?;
    acc.attn_adapters = AttentionAdapters {
        up_q: g_up_q,
        up_kv: g_up_kv,
        down: g_down,
    };
    acc.attn = g_attn;
    acc.norm_x1 = g_n1;
    acc.norm_x2 = g_n2;
    Ok((dx1, dx2))
}

/// `P_down(MoE(P_up(Norm_y1(y1_like))))`.
pub fn branch_mlp(y1_like: &Tensor, p: &BlockParams, mut tape: Option<&mut GradTape>) -> Result<Tensor> {
    let n = rmsnorm_fwd(y1_like, &p.norm_y1, tape.as_deref_mut())?;
    let u = linear_fwd(&n, &p.mlp_adapters.up, tape.as_deref_mut())?;
    let m = moe_fwd(&u, &p.router, &p.experts, tape.as_deref_mut())?;
    linear_fwd(&m, &p.mlp_adapters.down, tape)
}

pub fn branch_mlp_vjp(
    p: &BlockParams,
    tape: &mut GradTape,
    grad_out: &Tensor,
    acc: &mut BlockParams,
) -> Result<Tensor> {
    let (dm, g_down) = linear_vjp(&p.mlp_adapters.down, tape, grad_out)?;
    let (du, g_router, g_experts) = moe_vjp(&p.router, &p.experts, tape, &dm)?;
    let (dn, g_up) = linear_vjp(&p.mlp_adapters.up, tape, &du)?;
    let (dy1, g_norm) = rmsnorm_vjp(&p.norm_y1, tape, &dn)?;
    acc.mlp_adapters = AdapterPair {
        up: g_up,
        down: g_down,
    };
    acc.router = g_router;
    acc.experts = g_experts;
    acc.norm_y1 = g_norm;
    Ok(dy1)
}

fn attn_for(
    v: CouplingVariant,
    x1: &Tensor,
    x2: &Tensor,
    p: &BlockParams,
    tape: Option<&mut GradTape>,
) -> Result<Tensor> {
    match v {
        CouplingVariant::PaperAsymmetric => branch_attn(x1, x2, p, tape),
        CouplingVariant::StrictRevnet => branch_attn(x2, x2, p, tape),
    }
}

fn fwd_inner(x: &StreamPair, p: &BlockParams, v: CouplingVariant, mut tape: Option<&mut GradTape>) -> Result<StreamPair> {
    let a = attn_for(v, &x.left, &x.right, p, tape.as_deref_mut())?;
    let y1 = x.left.add(&a)?;
    let m = branch_mlp(&y1, p, tape)?;
    let y2 = x.right.add(&m)?;
    Ok(StreamPair { left: y1, right: y2 })
}

pub fn block_fwd(x: &StreamPair, p: &BlockParams, v: CouplingVariant) -> Result<StreamPair> {
    fwd_inner(x, p, v, None)
}

/// Settings for reconstructing a block input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseOptions {
    /// Fixed-point iterations for the paper coupling. Must be positive.
    pub iters: usize,
    /// When set, a residual above `tolerance * max(1, max|Y1|)` is an error.
    pub tolerance: Option<f64>,
}

impl InverseOptions {
    pub fn new(iters: usize) -> Self {
        Self {
            iters,
            tolerance: None,
        }
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = Some(tolerance);
        self
    }
}

/// Reconstructed block input.
#[derive(Debug, Clone)]
pub struct Inversion {
    pub x: StreamPair,
    /// Max-abs residual `|X1 - (Y1 - Attn(X1, X2))|` at the returned iterate.
    /// Exactly zero for strict coupling, where `X1` is computed in closed form.
    pub recon_error: f64,
}

pub fn block_inv(y: &StreamPair, p: &BlockParams, v: CouplingVariant, opts: InverseOptions) -> Result<Inversion> {
    if opts.iters == 0 {
        return Err(Error::config("inv_iters", "must be positive"));
    }
    let m = branch_mlp(&y.left, p, None)?;
    let x2 = y.right.sub(&m)?;
    let (x1, recon_error) = match v {
        CouplingVariant::StrictRevnet => {
            let a = branch_attn(&x2, &x2, p, None)?;
            (y.left.sub(&a)?, 0.0)
        }
        CouplingVariant::PaperAsymmetric => {
            let mut x1 = y.left.clone();
            for _ in 0..opts.iters {
                x1 = y.left.sub(&branch_attn(&x1, &x2, p, None)?)?;
            }
            let next = y.left.sub(&branch_attn(&x1, &x2, p, None)?)?;
            let residual = x1.max_abs_diff(&next)?;
            (x1, residual)
        }
    };
    if let Some(tol) = opts.tolerance {
        let threshold = tol * y.left.max_abs().max(1.0);
        if recon_error > threshold {
            return Err(Error::Reconstruction {
                ctx: ReconContext::default(),
                error: recon_error,
                tolerance: threshold,
            });
        }
    }
    Ok(Inversion {
        x: StreamPair { left: x1, right: x2 },
        recon_error,
    })
}

/// Output of a block backward.
#[derive(Debug, Clone)]
pub struct BlockBackward {
    /// Block input used for the recompute (reconstructed, or as given).
    pub x: StreamPair,
    pub grad_x: StreamPair,
    pub grad_params: BlockParams,
    pub recon_error: f64,
    /// Largest transient tape size during the local recompute, in scalars.
    pub tape_peak_scalars: usize,
}

/// Reversible backward: reconstruct the input from `y`, recompute the block
/// onto a local tape, and run the composed VJPs. The tape is dropped on return.
pub fn block_vjp(
    y: &StreamPair,
    grad_y: &StreamPair,
    p: &BlockParams,
    v: CouplingVariant,
    opts: InverseOptions,
) -> Result<BlockBackward> {
    let inv = block_inv(y, p, v, opts)?;
    let mut out = block_vjp_from_input(inv.x, grad_y, p, v)?;
    out.recon_error = inv.recon_error;
    Ok(out)
}

/// Backward from a known block input.
pub fn block_vjp_from_input(
    x: StreamPair,
    grad_y: &StreamPair,
    p: &BlockParams,
    v: CouplingVariant,
) -> Result<BlockBackward> {
    let mut tape = GradTape::new();
    fwd_inner(&x, p, v, Some(&mut tape))?;
    let tape_peak_scalars = tape.peak_scalars();

    let mut g = p.zeros_like();
    // Y1 feeds its own residual and the MLP branch.
    let gy1_mlp = branch_mlp_vjp(p, &mut tape, &grad_y.right, &mut g)?;
    let gy1 = grad_y.left.add(&gy1_mlp)?;
    let (ga1, ga2) = branch_attn_vjp(p, &mut tape, &gy1, &mut g)?;
    debug_assert!(tape.is_empty());
    let grad_x = match v {
        CouplingVariant::PaperAsymmetric => StreamPair {
            left: gy1.add(&ga1)?,
            right: grad_y.right.add(&ga2)?,
        },
        CouplingVariant::StrictRevnet => StreamPair {
            left: gy1,
            right: grad_y.right.add(&ga1)?.add(&ga2)?,
        },
    };
    Ok(BlockBackward {
        x,
        grad_x,
        grad_params: g,
        recon_error: 0.0,
        tape_peak_scalars,
    })
}

/// Estimate the spectral norm of `d Attn(X1, X2) / d X1` at the given point by
/// power iteration on `J^T J`, with `J v` from central differences and `J^T u`
/// from the exact VJP. Below 1 the fixed-point inverse is locally contractive.
pub fn attention_contraction(x1: &Tensor, x2: &Tensor, p: &BlockParams, iters: usize) -> Result<f64> {
    let mut rng = Rng::new(0x5eed);
    let mut v = Tensor::randn(x1.shape(), 1.0, Precision::Double, &mut rng)?;
    let x1 = x1.to_precision(Precision::Double)?;
    let x2 = x2.to_precision(Precision::Double)?;
    let h = 1e-6 * x1.max_abs().max(1.0);
    let mut sigma = 0.0;
    for _ in 0..iters.max(1) {
        let norm = v.dot(&v)?.sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        v = v.scale(1.0 / norm)?;
        let plus = branch_attn(&x1.add(&v.scale(h)?)?, &x2, p, None)?;
        let minus = branch_attn(&x1.sub(&v.scale(h)?)?, &x2, p, None)?;
        let jv = plus.sub(&minus)?.scale(0.5 / h)?;
        sigma = jv.dot(&jv)?.sqrt();
        let mut tape = GradTape::new();
        branch_attn(&x1, &x2, p, Some(&mut tape))?;
        let mut scratch = p.zeros_like();
        let (jt, _) = branch_attn_vjp(p, &mut tape, &jv, &mut scratch)?;
        v = jt;
    }
    Ok(sigma)
}
