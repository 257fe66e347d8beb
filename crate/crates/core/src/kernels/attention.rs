//! Multi-head scaled dot-product attention with separate query and key/value sources.
//!
//! Queries are projected from `q_src`; keys and values are both projected
//! from `kv_src`. Because K and V share a source, the VJP returns the sum of
//! key-path and value-path gradients for `kv_src`.

use super::linear::{linear_fwd, linear_vjp, LinearParams};
use super::tape::{record, AttentionSaved, GradTape, Primitive, Saved};
use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Precision, Rng, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: LinearParams,
    pub wk: LinearParams,
    pub wv: LinearParams,
    pub wo: LinearParams,
    pub n_heads: usize,
    pub causal: bool,
}

impl AttentionParams {
    pub fn randn(
        d_model: usize,
        n_heads: usize,
        causal: bool,
        precision: Precision,
        rng: &mut Rng,
    ) -> Result<Self> {
        check_heads(d_model, n_heads)?;
        let std = (d_model as f64).powf(-0.5);
        Ok(Self {
            wq: LinearParams::randn(d_model, d_model, std, precision, rng)?,
            wk: LinearParams::randn(d_model, d_model, std, precision, rng)?,
            wv: LinearParams::randn(d_model, d_model, std, precision, rng)?,
            wo: LinearParams::randn(d_model, d_model, std, precision, rng)?,
            n_heads,
            causal,
        })
    }

    pub fn d_model(&self) -> usize {
        self.wq.out_features()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model() / self.n_heads
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            wq: self.wq.zeros_like(),
            wk: self.wk.zeros_like(),
            wv: self.wv.zeros_like(),
            wo: self.wo.zeros_like(),
            n_heads: self.n_heads,
            causal: self.causal,
        }
    }
}

fn check_heads(d_model: usize, n_heads: usize) -> Result<()> {
    if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
        return Err(Error::HeadDivisibility { d_model, n_heads });
    }
    Ok(())
}

fn check_inputs(q_src: &Tensor, kv_src: &Tensor, p: &AttentionParams) -> Result<(usize, usize)> {
    check_heads(p.d_model(), p.n_heads)?;
    let ok = q_src.rank() == 3 && q_src.shape() == kv_src.shape() && q_src.shape()[2] == p.d_model();
    if !ok {
        return Err(Error::ShapeMismatch {
            op: "cross_attention",
            lhs: q_src.shape().to_vec(),
            rhs: kv_src.shape().to_vec(),
        });
    }
    Ok((q_src.shape()[0], q_src.shape()[1]))
}

/// Scaled dot-product core on projected tensors. Returns `(context, probs)`.
fn attention_core(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    n_heads: usize,
    causal: bool,
) -> Result<(Tensor, Tensor)> {
    let (b, s, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut ctx = vec![0.0; b * s * d];
    let mut probs = vec![0.0; b * n_heads * s * s];
    let mut row = vec![0.0; s];
    for bi in 0..b {
        for h in 0..n_heads {
            let off = h * dh;
            for i in 0..s {
                let keys = if causal { i + 1 } else { s };
                let qi = &qd[(bi * s + i) * d + off..][..dh];
                for (j, r) in row[..keys].iter_mut().enumerate() {
                    let kj = &kd[(bi * s + j) * d + off..][..dh];
                    *r = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                }
                softmax_in_place(&mut row[..keys]);
                let prow = &mut probs[((bi * n_heads + h) * s + i) * s..][..s];
                prow[..keys].copy_from_slice(&row[..keys]);
                let out = &mut ctx[(bi * s + i) * d + off..][..dh];
                for (j, &pij) in prow[..keys].iter().enumerate() {
                    let vj = &vd[(bi * s + j) * d + off..][..dh];
                    for (o, vv) in out.iter_mut().zip(vj) {
                        *o += pij * vv;
                    }
                }
            }
        }
    }
    let prec = q.precision();
    Ok((
        Tensor::build("attention", vec![b, s, d], ctx, prec)?,
        Tensor::build("attention", vec![b, n_heads, s, s], probs, prec)?,
    ))
}

/// Returns `(dq, dk, dv)` for the projected tensors.
fn attention_core_vjp(saved: &AttentionSaved, n_heads: usize, dctx: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let AttentionSaved { q, k, v, probs } = saved;
    let (b, s, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd, pd, gd) = (q.data(), k.data(), v.data(), probs.data(), dctx.data());
    let mut dq = vec![0.0; b * s * d];
    let mut dk = vec![0.0; b * s * d];
    let mut dv = vec![0.0; b * s * d];
    let mut dp = vec![0.0; s];
    for bi in 0..b {
        for h in 0..n_heads {
            let off = h * dh;
            for i in 0..s {
                let prow = &pd[((bi * n_heads + h) * s + i) * s..][..s];
                let gi = &gd[(bi * s + i) * d + off..][..dh];
                for j in 0..s {
                    let vj = &vd[(bi * s + j) * d + off..][..dh];
                    dp[j] = gi.iter().zip(vj).map(|(a, c)| a * c).sum();
                    let dvj = &mut dv[(bi * s + j) * d + off..][..dh];
                    for (o, g) in dvj.iter_mut().zip(gi) {
                        *o += prow[j] * g;
                    }
                }
                let inner: f64 = prow.iter().zip(&dp).map(|(p, g)| p * g).sum();
                let qi = &qd[(bi * s + i) * d + off..][..dh];
                for j in 0..s {
                    let ds = prow[j] * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &kd[(bi * s + j) * d + off..][..dh];
                    let dqi = &mut dq[(bi * s + i) * d + off..][..dh];
                    for (o, kk) in dqi.iter_mut().zip(kj) {
                        *o += ds * kk;
                    }
                    let dkj = &mut dk[(bi * s + j) * d + off..][..dh];
                    for (o, qq) in dkj.iter_mut().zip(qi) {
                        *o += ds * qq;
                    }
                }
            }
        }
    }
    let prec = q.precision();
    let shape = vec![b, s, d];
    Ok((
        Tensor::build("attention_vjp", shape.clone(), dq, prec)?,
        Tensor::build("attention_vjp", shape.clone(), dk, prec)?,
        Tensor::build("attention_vjp", shape, dv, prec)?,
    ))
}

/// `wo(Attention(q = wq(q_src), k = wk(kv_src), v = wv(kv_src)))` over `[B, S, d_model]`.
pub fn cross_attention_fwd(
    q_src: &Tensor,
    kv_src: &Tensor,
    p: &AttentionParams,
    mut tape: Option<&mut GradTape>,
) -> Result<Tensor> {
    check_inputs(q_src, kv_src, p)?;
    let q = linear_fwd(q_src, &p.wq, tape.as_deref_mut())?;
    let k = linear_fwd(kv_src, &p.wk, tape.as_deref_mut())?;
    let v = linear_fwd(kv_src, &p.wv, tape.as_deref_mut())?;
    let (ctx, probs) = attention_core(&q, &k, &v, p.n_heads, p.causal)?;
    record(&mut tape, || Saved::Attention(AttentionSaved { q, k, v, probs }));
    linear_fwd(&ctx, &p.wo, tape)
}

/// Attention probabilities `[B, H, S, S]` for inspection.
pub fn cross_attention_weights(q_src: &Tensor, kv_src: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    check_inputs(q_src, kv_src, p)?;
    let q = linear_fwd(q_src, &p.wq, None)?;
    let k = linear_fwd(kv_src, &p.wk, None)?;
    let v = linear_fwd(kv_src, &p.wv, None)?;
    Ok(attention_core(&q, &k, &v, p.n_heads, p.causal)?.1)
}

/// Returns `(grad_q_src, grad_kv_src, grad_params)`.
pub fn cross_attention_vjp(
    p: &AttentionParams,
    tape: &mut GradTape,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, AttentionParams)> {
    let (dctx, gwo) = linear_vjp(&p.wo, tape, grad_out)?;
    let Saved::Attention(saved) = tape.pop(Primitive::Attention)? else {
        unreachable!()
    };
    let (dq, dk, dv) = attention_core_vjp(&saved, p.n_heads, &dctx)?;
    let (dkv_v, gwv) = linear_vjp(&p.wv, tape, &dv)?;
    let (dkv_k, gwk) = linear_vjp(&p.wk, tape, &dk)?;
    let (dq_src, gwq) = linear_vjp(&p.wq, tape, &dq)?;
    let dkv = dkv_k.add(&dkv_v)?;
    Ok((
        dq_src,
        dkv,
        AttentionParams {
            wq: gwq,
            wk: gwk,
            wv: gwv,
            wo: gwo,
            n_heads: p.n_heads,
            causal: p.causal,
        },
    ))
}
