use super::tape::{record, GradTape, Primitive, Saved};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

/// RMS normalization with a learned gain.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gain: Tensor,
    pub eps: f64,
}

impl NormParams {
    pub fn ones(width: usize, eps: f64, precision: Precision) -> Result<Self> {
        if eps.is_nan() || eps < 0.0 {
            return Err(Error::config("eps", "must be non-negative"));
        }
        Ok(Self {
            gain: Tensor::full(&[width], 1.0, precision)?,
            eps,
        })
    }

    pub fn width(&self) -> usize {
        self.gain.numel()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gain: self.gain.zeros_like(),
            eps: self.eps,
        }
    }
}

fn check_width(x: &Tensor, p: &NormParams) -> Result<()> {
    if x.last_dim() != p.width() {
        return Err(Error::ShapeMismatch {
            op: "rmsnorm",
            lhs: x.shape().to_vec(),
            rhs: p.gain.shape().to_vec(),
        });
    }
    Ok(())
}

fn inv_rms(row: &[f64], eps: f64) -> f64 {
    let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
    let denom = (ms + eps).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        1.0 / denom
    }
}

/// `y = gain * x / sqrt(mean(x^2) + eps)` over the last axis.
pub fn rmsnorm_fwd(x: &Tensor, p: &NormParams, mut tape: Option<&mut GradTape>) -> Result<Tensor> {
    check_width(x, p)?;
    let d = p.width();
    let g = p.gain.data();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(d) {
        let r = inv_rms(row, p.eps);
        out.extend(row.iter().zip(g).map(|(v, gj)| gj * v * r));
    }
    record(&mut tape, || Saved::RmsNorm { input: x.clone() });
    Tensor::build("rmsnorm", x.shape().to_vec(), out, x.precision())
}

/// Returns `(grad_x, grad_params)`.
pub fn rmsnorm_vjp(
    p: &NormParams,
    tape: &mut GradTape,
    grad_out: &Tensor,
) -> Result<(Tensor, NormParams)> {
    let Saved::RmsNorm { input } = tape.pop(Primitive::RmsNorm)? else {
        unreachable!()
    };
    if input.shape() != grad_out.shape() {
        return Err(Error::ShapeMismatch {
            op: "rmsnorm_vjp",
            lhs: input.shape().to_vec(),
            rhs: grad_out.shape().to_vec(),
        });
    }
    let d = p.width();
    let g = p.gain.data();
    let mut dx = Vec::with_capacity(input.numel());
    let mut dgain = vec![0.0; d];
    for (row, dy) in input.data().chunks_exact(d).zip(grad_out.data().chunks_exact(d)) {
        let r = inv_rms(row, p.eps);
        // sum_j g_j dy_j x_j
        let s: f64 = row
            .iter()
            .zip(dy)
            .zip(g)
            .map(|((x, dyj), gj)| gj * dyj * x)
            .sum();
        let coef = s * r * r * r / d as f64;
        for j in 0..d {
            dx.push(g[j] * dy[j] * r - row[j] * coef);
            dgain[j] += dy[j] * row[j] * r;
        }
    }
    let prec = input.precision();
    Ok((
        Tensor::build("rmsnorm_vjp", input.shape().to_vec(), dx, prec)?,
        NormParams {
            gain: Tensor::build("rmsnorm_vjp", vec![d], dgain, prec)?,
            eps: p.eps,
        },
    ))
}
