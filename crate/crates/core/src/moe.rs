//! Top-k routed mixture-of-experts feed-forward layer.
//!
//! Each token scores every expert with a linear gate, keeps the `top_k`
//! highest logits (ties go to the lower expert index) and mixes the selected
//! experts with a softmax over the selected logits only. The VJP treats the
//! discrete selection as locally constant.

use crate::error::{Error, Result};
use crate::kernels::{mlp_fwd, mlp_vjp, record, GradTape, MlpParams, Primitive, Saved};
use crate::tensor::{softmax_in_place, Precision, Rng, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    /// `[n_experts x d_model]`
    pub gate_weight: Tensor,
    pub top_k: usize,
    /// Frozen routers report an all-zero parameter gradient.
    pub frozen: bool,
}

impl RouterParams {
    pub fn randn(
        n_experts: usize,
        d_model: usize,
        top_k: usize,
        frozen: bool,
        precision: Precision,
        rng: &mut Rng,
    ) -> Result<Self> {
        check_top_k(top_k, n_experts)?;
        Ok(Self {
            gate_weight: Tensor::randn(&[n_experts, d_model], (d_model as f64).powf(-0.5), precision, rng)?,
            top_k,
            frozen,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.gate_weight.shape()[0]
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gate_weight: self.gate_weight.zeros_like(),
            top_k: self.top_k,
            frozen: self.frozen,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBank {
    pub experts: Vec<MlpParams>,
}

impl ExpertBank {
    pub fn randn(
        n_experts: usize,
        d_model: usize,
        d_ff: usize,
        precision: Precision,
        rng: &mut Rng,
    ) -> Result<Self> {
        let experts = (0..n_experts)
            .map(|_| MlpParams::randn(d_model, d_ff, precision, rng))
            .collect::<Result<_>>()?;
        Ok(Self { experts })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            experts: self.experts.iter().map(MlpParams::zeros_like).collect(),
        }
    }
}

fn check_top_k(top_k: usize, n_experts: usize) -> Result<()> {
    if top_k == 0 || top_k > n_experts {
        return Err(Error::TopK { top_k, n_experts });
    }
    Ok(())
}

/// Per-token expert selection.
#[derive(Debug, Clone, PartialEq)]
pub struct Routing {
    pub top_k: usize,
    /// `[T * top_k]`, row-major; each row in decreasing logit order.
    pub indices: Vec<usize>,
    /// `[T x top_k]`, softmax over the selected logits.
    pub weights: Tensor,
    /// `[T x n_experts]`
    pub logits: Tensor,
}

impl Routing {
    pub fn tokens(&self) -> usize {
        self.indices.len() / self.top_k
    }

    pub fn experts_for(&self, token: usize) -> &[usize] {
        &self.indices[token * self.top_k..(token + 1) * self.top_k]
    }

    pub fn weights_for(&self, token: usize) -> &[f64] {
        self.weights.row(token)
    }
}

/// Route every row of `x` (`[..., d_model]`).
pub fn route(x: &Tensor, r: &RouterParams) -> Result<Routing> {
    let n_experts = r.n_experts();
    check_top_k(r.top_k, n_experts)?;
    let d = r.gate_weight.shape()[1];
    if x.last_dim() != d {
        return Err(Error::ShapeMismatch {
            op: "route",
            lhs: x.shape().to_vec(),
            rhs: r.gate_weight.shape().to_vec(),
        });
    }
    let rows = x.reshape(&[x.rows(), d])?;
    let logits = rows.matmul_nt(&r.gate_weight)?;
    let k = r.top_k;
    let mut indices = Vec::with_capacity(rows.rows() * k);
    let mut weights = Vec::with_capacity(rows.rows() * k);
    let mut order: Vec<usize> = Vec::with_capacity(n_experts);
    for t in 0..rows.rows() {
        let l = logits.row(t);
        order.clear();
        order.extend(0..n_experts);
        // stable sort keeps lower indices first among equal logits
        order.sort_by(|&a, &b| l[b].total_cmp(&l[a]));
        let mut sel: Vec<f64> = order[..k].iter().map(|&e| l[e]).collect();
        softmax_in_place(&mut sel);
        indices.extend_from_slice(&order[..k]);
        weights.extend(sel);
    }
    Ok(Routing {
        top_k: k,
        indices,
        weights: Tensor::build("route", vec![rows.rows(), k], weights, x.precision())?,
        logits,
    })
}

/// Saved forward state of one MoE call.
#[derive(Debug, Clone)]
pub struct MoeSaved {
    input: Tensor,
    routing: Routing,
    experts: Vec<Option<ExpertSlot>>,
}

#[derive(Debug, Clone)]
struct ExpertSlot {
    /// `(token, slot)` pairs routed to this expert, in token order.
    assignments: Vec<(usize, usize)>,
    tape: GradTape,
    output: Tensor,
}

impl MoeSaved {
    pub fn scalars(&self) -> usize {
        let experts: usize = self
            .experts
            .iter()
            .flatten()
            .map(|s| s.tape.scalars() + s.output.numel())
            .sum();
        self.input.numel() + self.routing.weights.numel() + self.routing.logits.numel() + experts
    }
}

/// `out[t] = sum_i w[t,i] * expert_{idx[t,i]}(x[t])` over rows of `x`.
pub fn moe_fwd(
    x: &Tensor,
    r: &RouterParams,
    e: &ExpertBank,
    mut tape: Option<&mut GradTape>,
) -> Result<Tensor> {
    if e.len() != r.n_experts() {
        return Err(Error::TopK {
            top_k: r.top_k,
            n_experts: e.len(),
        });
    }
    let routing = route(x, r)?;
    let d = x.last_dim();
    let rows = x.reshape(&[x.rows(), d])?;
    let t_count = rows.rows();
    let k = routing.top_k;

    let mut assignments: Vec<Vec<(usize, usize)>> = vec![Vec::new(); e.len()];
    for t in 0..t_count {
        for (slot, &ex) in routing.experts_for(t).iter().enumerate() {
            assignments[ex].push((t, slot));
        }
    }

    // slot_out[(t * k + slot) * d ..] holds expert output for that slot
    let mut slot_out = vec![0.0; t_count * k * d];
    let mut slots = Vec::with_capacity(e.len());
    for (ex, assigned) in assignments.into_iter().enumerate() {
        if assigned.is_empty() {
            slots.push(None);
            continue;
        }
        let token_ids: Vec<usize> = assigned.iter().map(|&(t, _)| t).collect();
        let xin = rows.gather_rows(&token_ids)?;
        let mut sub = GradTape::new();
        let keep = tape.is_some();
        let out = mlp_fwd(&xin, &e.experts[ex], keep.then_some(&mut sub))?;
        for (i, &(t, slot)) in assigned.iter().enumerate() {
            slot_out[(t * k + slot) * d..][..d].copy_from_slice(out.row(i));
        }
        slots.push(keep.then_some(ExpertSlot {
            assignments: assigned,
            tape: sub,
            output: out,
        }));
    }

    let mut y = vec![0.0; t_count * d];
    for t in 0..t_count {
        let w = routing.weights_for(t);
        let yt = &mut y[t * d..][..d];
        for (slot, &wi) in w.iter().enumerate() {
            for (o, v) in yt.iter_mut().zip(&slot_out[(t * k + slot) * d..][..d]) {
                *o += wi * v;
            }
        }
    }
    let out = Tensor::build("moe", x.shape().to_vec(), y, x.precision())?;
    record(&mut tape, || {
        Saved::Moe(Box::new(MoeSaved {
            input: rows,
            routing,
            experts: slots,
        }))
    });
    Ok(out)
}

/// Returns `(grad_x, grad_router, grad_experts)`.
pub fn moe_vjp(
    r: &RouterParams,
    e: &ExpertBank,
    tape: &mut GradTape,
    grad_out: &Tensor,
) -> Result<(Tensor, RouterParams, ExpertBank)> {
    let Saved::Moe(saved) = tape.pop(Primitive::Moe)? else {
        unreachable!()
    };
    let MoeSaved {
        input,
        routing,
        experts,
    } = *saved;
    let d = input.last_dim();
    let t_count = input.rows();
    if grad_out.numel() != t_count * d || grad_out.last_dim() != d {
        return Err(Error::ShapeMismatch {
            op: "moe_vjp",
            lhs: input.shape().to_vec(),
            rhs: grad_out.shape().to_vec(),
        });
    }
    let dy = grad_out.data();
    let k = routing.top_k;
    let mut dx = vec![0.0; t_count * d];
    // d loss / d w[t, slot]
    let mut dw = vec![0.0; t_count * k];
    let mut grad_experts = e.zeros_like();

    for (ex, slot) in experts.into_iter().enumerate() {
        let Some(ExpertSlot {
            assignments,
            mut tape,
            output,
        }) = slot
        else {
            continue;
        };
        let mut upstream = Vec::with_capacity(assignments.len() * d);
        for (i, &(t, s)) in assignments.iter().enumerate() {
            let w = routing.weights_for(t)[s];
            let dyt = &dy[t * d..][..d];
            upstream.extend(dyt.iter().map(|g| w * g));
            dw[t * k + s] = dyt.iter().zip(output.row(i)).map(|(g, o)| g * o).sum();
        }
        let up = Tensor::build("moe_vjp", vec![assignments.len(), d], upstream, input.precision())?;
        let (dxe, ge) = mlp_vjp(&e.experts[ex], &mut tape, &up)?;
        for (i, &(t, _)) in assignments.iter().enumerate() {
            for (o, v) in dx[t * d..][..d].iter_mut().zip(dxe.row(i)) {
                *o += v;
            }
        }
        grad_experts.experts[ex] = ge;
    }

    // Softmax over selected logits: dlogit_i = w_i (dw_i - sum_j w_j dw_j)
    let gate = r.gate_weight.data();
    let mut dgate = vec![0.0; r.gate_weight.numel()];
    for t in 0..t_count {
        let w = routing.weights_for(t);
        let dwt = &dw[t * k..][..k];
        let inner: f64 = w.iter().zip(dwt).map(|(a, b)| a * b).sum();
        let xt = input.row(t);
        for (slot, &ex) in routing.experts_for(t).iter().enumerate() {
            let dl = w[slot] * (dwt[slot] - inner);
            for (o, g) in dx[t * d..][..d].iter_mut().zip(&gate[ex * d..][..d]) {
                *o += dl * g;
            }
            for (o, xv) in dgate[ex * d..][..d].iter_mut().zip(xt) {
                *o += dl * xv;
            }
        }
    }
    let grad_gate = if r.frozen {
        r.gate_weight.zeros_like()
    } else {
        Tensor::build("moe_vjp", r.gate_weight.shape().to_vec(), dgate, input.precision())?
    };
    Ok((
        Tensor::build("moe_vjp", grad_out.shape().to_vec(), dx, input.precision())?,
        RouterParams {
            gate_weight: grad_gate,
            top_k: r.top_k,
            frozen: r.frozen,
        },
        grad_experts,
    ))
}
