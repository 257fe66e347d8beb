use super::tape::{record, GradTape, Primitive, Saved};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Rng, Tensor};

/// Affine map `y = x W^T + b` over the last axis. `weight` is `[out x in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl LinearParams {
    /// Weights ~ N(0, std^2), no bias.
    pub fn randn(out: usize, inp: usize, std: f64, precision: Precision, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            weight: Tensor::randn(&[out, inp], std, precision, rng)?,
            bias: None,
        })
    }

    pub fn zeros(out: usize, inp: usize, precision: Precision) -> Result<Self> {
        Ok(Self {
            weight: Tensor::zeros(&[out, inp], precision)?,
            bias: None,
        })
    }

    pub fn with_bias(mut self, bias: Tensor) -> Result<Self> {
        if bias.shape() != [self.out_features()] {
            return Err(Error::ShapeMismatch {
                op: "linear bias",
                lhs: self.weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        self.bias = Some(bias);
        Ok(self)
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: self.weight.zeros_like(),
            bias: self.bias.as_ref().map(Tensor::zeros_like),
        }
    }
}

fn rows_view(x: &Tensor, width: usize, op: &'static str) -> Result<Tensor> {
    if x.last_dim() != width {
        return Err(Error::ShapeMismatch {
            op,
            lhs: x.shape().to_vec(),
            rhs: vec![width],
        });
    }
    x.reshape(&[x.rows(), width])
}

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().unwrap() = last;
    s
}

pub fn linear_fwd(x: &Tensor, p: &LinearParams, mut tape: Option<&mut GradTape>) -> Result<Tensor> {
    let x2 = rows_view(x, p.in_features(), "linear")?;
    let mut y = x2.matmul_nt(&p.weight)?;
    if let Some(b) = &p.bias {
        y = y.add(b)?;
    }
    record(&mut tape, || Saved::Linear { input: x.clone() });
    y.reshape(&with_last(x.shape(), p.out_features()))
}

/// Returns `(grad_x, grad_params)`.
pub fn linear_vjp(
    p: &LinearParams,
    tape: &mut GradTape,
    grad_out: &Tensor,
) -> Result<(Tensor, LinearParams)> {
    let Saved::Linear { input } = tape.pop(Primitive::Linear)? else {
        unreachable!()
    };
    if grad_out.shape() != with_last(input.shape(), p.out_features()) {
        return Err(Error::ShapeMismatch {
            op: "linear_vjp",
            lhs: input.shape().to_vec(),
            rhs: grad_out.shape().to_vec(),
        });
    }
    let x2 = rows_view(&input, p.in_features(), "linear_vjp")?;
    let dy = grad_out.reshape(&[grad_out.rows(), p.out_features()])?;
    let dx = dy.matmul(&p.weight)?.reshape(input.shape())?;
    let dw = dy.transpose()?.matmul(&x2)?;
    let db = match &p.bias {
        Some(_) => Some(dy.sum_leading()?),
        None => None,
    };
    Ok((dx, LinearParams { weight: dw, bias: db }))
}
