use super::linear::{linear_fwd, linear_vjp, LinearParams};
use super::tape::{record, GradTape, Primitive, Saved};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Rng, Tensor};

/// Two linears with SiLU between: `fc2(silu(fc1(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl MlpParams {
    pub fn randn(d_model: usize, d_ff: usize, precision: Precision, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            fc1: LinearParams::randn(d_ff, d_model, (d_model as f64).powf(-0.5), precision, rng)?,
            fc2: LinearParams::randn(d_model, d_ff, (d_ff as f64).powf(-0.5), precision, rng)?,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            fc1: self.fc1.zeros_like(),
            fc2: self.fc2.zeros_like(),
        }
    }
}

pub fn silu_fwd(x: &Tensor, mut tape: Option<&mut GradTape>) -> Result<Tensor> {
    record(&mut tape, || Saved::Silu { input: x.clone() });
    x.silu()
}

pub fn silu_vjp(tape: &mut GradTape, grad_out: &Tensor) -> Result<Tensor> {
    let Saved::Silu { input } = tape.pop(Primitive::Silu)? else {
        unreachable!()
    };
    if input.shape() != grad_out.shape() {
        return Err(Error::ShapeMismatch {
            op: "silu_vjp",
            lhs: input.shape().to_vec(),
            rhs: grad_out.shape().to_vec(),
        });
    }
    input.silu_grad()?.mul(grad_out)
}

pub fn mlp_fwd(x: &Tensor, p: &MlpParams, mut tape: Option<&mut GradTape>) -> Result<Tensor> {
    let h = linear_fwd(x, &p.fc1, tape.as_deref_mut())?;
    let a = silu_fwd(&h, tape.as_deref_mut())?;
    linear_fwd(&a, &p.fc2, tape)
}

pub fn mlp_vjp(p: &MlpParams, tape: &mut GradTape, grad_out: &Tensor) -> Result<(Tensor, MlpParams)> {
    let (da, g2) = linear_vjp(&p.fc2, tape, grad_out)?;
    let dh = silu_vjp(tape, &da)?;
    let (dx, g1) = linear_vjp(&p.fc1, tape, &dh)?;
    Ok((dx, MlpParams { fc1: g1, fc2: g2 }))
}
