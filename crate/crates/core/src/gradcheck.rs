//! Finite-difference and cross-strategy gradient checks.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{model_bwd_caching, model_bwd_reversible, model_loss, ModelConfig, ModelParams, TokenBatch};
use crate::params::{named_tensors, named_tensors_mut};
use crate::tensor::{Precision, Rng, Tensor};

/// Default central-difference step, scaled by `max(1, |x|)` per coordinate.
pub const FD_STEP: f64 = 1e-5;

/// `max|a - b| / max(max|a|, max|b|)`, and 0 when both are zero.
pub fn relative_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    let diff = a.max_abs_diff(b)?;
    let scale = a.max_abs().max(b.max_abs());
    Ok(if scale == 0.0 { diff } else { diff / scale })
}

/// Scalar relative error with an absolute floor on the denominator.
pub fn scalar_relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        return 0.0;
    }
    d / a.abs().max(b.abs()).max(floor)
}

/// Central-difference gradient of a scalar function of one tensor.
pub fn fd_gradient(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> Result<f64>) -> Result<Tensor> {
    let x = x.to_precision(Precision::Double)?;
    let mut grad = Vec::with_capacity(x.numel());
    let mut work = x.data().to_vec();
    for i in 0..x.numel() {
        let orig = work[i];
        let step = h * orig.abs().max(1.0);
        work[i] = orig + step;
        let plus = f(&Tensor::from_vec(x.shape().to_vec(), work.clone(), Precision::Double)?)?;
        work[i] = orig - step;
        let minus = f(&Tensor::from_vec(x.shape().to_vec(), work.clone(), Precision::Double)?)?;
        work[i] = orig;
        grad.push((plus - minus) / (2.0 * step));
    }
    Tensor::from_vec(x.shape().to_vec(), grad, Precision::Double)
}

/// Largest per-tensor relative error between two gradient sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradComparison {
    pub max_relative_error: f64,
    pub worst_tensor: Option<String>,
    pub per_tensor: Vec<(String, f64)>,
}

pub fn compare_grads(a: &ModelParams, b: &ModelParams) -> Result<GradComparison> {
    let mut per_tensor = Vec::new();
    let mut worst = None;
    let mut max = 0.0f64;
    for ((name, _, ta), (_, _, tb)) in named_tensors(a).into_iter().zip(named_tensors(b)) {
        let e = relative_error(ta, tb)?;
        if e > max || worst.is_none() {
            max = max.max(e);
            worst = Some(name.clone());
        }
        per_tensor.push((name, e));
    }
    Ok(GradComparison {
        max_relative_error: max,
        worst_tensor: worst,
        per_tensor,
    })
}

/// Reversible backward against the caching oracle on one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyComparison {
    pub loss_reversible: f64,
    pub loss_caching: f64,
    pub loss_relative_error: f64,
    pub grads: GradComparison,
    pub max_recon_error: f64,
}

impl StrategyComparison {
    pub fn max_relative_error(&self) -> f64 {
        self.loss_relative_error.max(self.grads.max_relative_error)
    }
}

pub fn compare_strategies(
    tokens: &TokenBatch,
    targets: &TokenBatch,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<StrategyComparison> {
    let rev = model_bwd_reversible(tokens, targets, params, cfg, None)?;
    let cac = model_bwd_caching(tokens, targets, params, cfg, None)?;
    Ok(StrategyComparison {
        loss_reversible: rev.loss,
        loss_caching: cac.loss,
        loss_relative_error: scalar_relative_error(rev.loss, cac.loss, 0.0),
        grads: compare_grads(&rev.grads, &cac.grads)?,
        max_recon_error: rev.max_recon_error(),
    })
}

/// One sampled parameter coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdSample {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub samples: Vec<FdSample>,
    pub max_relative_error: f64,
    /// Denominator floor used for the per-coordinate relative error.
    pub floor: f64,
}

/// Compare the reversible gradient to central differences of the loss on
/// `n` parameter coordinates drawn uniformly over all parameters that have a
/// gradient. Frozen routers report zero by construction and are skipped.
pub fn model_fd_check(
    tokens: &TokenBatch,
    targets: &TokenBatch,
    params: &ModelParams,
    cfg: &ModelConfig,
    n: usize,
    seed: u64,
) -> Result<FdReport> {
    let rev = model_bwd_reversible(tokens, targets, params, cfg, None)?;
    let grads = named_tensors(&rev.grads);
    let frozen_router = |name: &str| {
        params
            .blocks
            .iter()
            .enumerate()
            .any(|(l, b)| b.router.frozen && name.starts_with(&format!("blocks.{l}.router.")))
    };
    let sizes: Vec<usize> = grads
        .iter()
        .map(|(name, _, t)| if frozen_router(name) { 0 } else { t.numel() })
        .collect();
    let total: usize = sizes.iter().sum();
    // Coordinates whose gradient is below this are compared absolutely.
    let floor = 1e-3 * grads.iter().map(|(_, _, t)| t.max_abs()).fold(0.0, f64::max).max(1e-12);

    let mut rng = Rng::new(seed).fork(0xfd);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        if total == 0 {
            break;
        }
        let mut flat = rng.below(total);
        let mut ti = 0;
        while flat >= sizes[ti] {
            flat -= sizes[ti];
            ti += 1;
        }
        let analytic = grads[ti].2.data()[flat];
        let orig = named_tensors(params)[ti].2.data()[flat];
        let step = FD_STEP * orig.abs().max(1.0);
        let eval_at = |value: f64| -> Result<f64> {
            let mut p = params.clone();
            let (_, _, t) = named_tensors_mut(&mut p).swap_remove(ti);
            let mut data = t.data().to_vec();
            data[flat] = value;
            *t = Tensor::from_vec(t.shape().to_vec(), data, t.precision())?;
            model_loss(tokens, targets, &p, cfg)
        };
        let numeric = (eval_at(orig + step)? - eval_at(orig - step)?) / (2.0 * step);
        samples.push(FdSample {
            tensor: grads[ti].0.clone(),
            index: flat,
            analytic,
            numeric,
            relative_error: scalar_relative_error(analytic, numeric, floor),
        });
    }
    let max_relative_error = samples.iter().map(|s| s.relative_error).fold(0.0, f64::max);
    Ok(FdReport {
        samples,
        max_relative_error,
        floor,
    })
}
