//! The full language model: embeddings, a stack of reversible blocks, final
//! norm and LM head, with two backward strategies.
//!
//! [`model_bwd_reversible`] keeps only the final boundary pair and rebuilds
//! each block input from its output on the way down. [`model_bwd_caching`]
//! stores every block input during the forward pass and serves as the
//! correctness oracle. Both report an [`ActivationLedger`].

use serde::{Deserialize, Serialize};

use crate::block::{
    block_fwd, block_vjp, block_vjp_from_input, concat, split, BlockDims, BlockParams, CouplingVariant,
    InverseOptions, StreamPair,
};
use crate::error::{Error, Result};
use crate::kernels::{linear_fwd, linear_vjp, rmsnorm_fwd, rmsnorm_vjp, GradTape, LinearParams, NormParams};
use crate::params::TrainableMask;
use crate::tensor::{Precision, Rng, Tensor};

fn default_causal() -> bool {
    true
}

fn default_norm_eps() -> f64 {
    1e-6
}

/// Architectural and numerical hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub coupling: CouplingVariant,
    pub inv_iters: usize,
    /// Relative reconstruction tolerance, scaled by `max(1, max|Y1|)`.
    pub inv_tolerance: f64,
    pub precision: Precision,
    pub seed: u64,
    #[serde(default = "default_causal")]
    pub causal: bool,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

impl ModelConfig {
    /// Small model for tests and examples.
    pub fn tiny() -> Self {
        Self {
            vocab_size: 64,
            d_model: 16,
            n_heads: 2,
            n_layers: 4,
            n_experts: 4,
            top_k: 2,
            d_ff: 32,
            max_seq_len: 32,
            coupling: CouplingVariant::PaperAsymmetric,
            inv_iters: 8,
            inv_tolerance: 1e-4,
            precision: Precision::Double,
            seed: 0,
            causal: true,
            norm_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_experts", self.n_experts),
            ("top_k", self.top_k),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
            ("inv_iters", self.inv_iters),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::config("d_model", "must be even to split into two streams"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config("n_heads", format!("must divide d_model {}", self.d_model)));
        }
        if self.top_k > self.n_experts {
            return Err(Error::config("top_k", format!("must not exceed n_experts {}", self.n_experts)));
        }
        if !(self.inv_tolerance > 0.0 && self.inv_tolerance.is_finite()) {
            return Err(Error::config("inv_tolerance", "must be a positive finite number"));
        }
        if !(self.norm_eps >= 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::config("norm_eps", "must be non-negative"));
        }
        Ok(())
    }

    pub fn block_dims(&self) -> BlockDims {
        BlockDims {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_experts: self.n_experts,
            top_k: self.top_k,
            d_ff: self.d_ff,
            causal: self.causal,
            norm_eps: self.norm_eps,
        }
    }

    pub fn inverse_options(&self) -> InverseOptions {
        InverseOptions::new(self.inv_iters).with_tolerance(self.inv_tolerance)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `[vocab x d]`
    pub token_embedding: Tensor,
    /// `[max_seq_len x d]`
    pub position_embedding: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_norm: NormParams,
    /// `[vocab x d]`
    pub lm_head: LinearParams,
}

impl ModelParams {
    /// Seeded initialization. Every down-projection starts at zero, so each
    /// block is the identity until trained.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.precision;
        let d = cfg.d_model;
        let root = Rng::new(cfg.seed);
        let mut rng = root.fork(0);
        let token_embedding = Tensor::randn(&[cfg.vocab_size, d], 1.0, p, &mut rng)?;
        let position_embedding = Tensor::randn(&[cfg.max_seq_len, d], 0.1, p, &mut rng)?;
        let lm_head = LinearParams::randn(cfg.vocab_size, d, (d as f64).powf(-0.5), p, &mut rng)?;
        let dims = cfg.block_dims();
        let blocks = (0..cfg.n_layers)
            .map(|l| BlockParams::init(&dims, p, &mut root.fork(l as u64 + 1)))
            .collect::<Result<_>>()?;
        Ok(Self {
            token_embedding,
            position_embedding,
            blocks,
            final_norm: NormParams::ones(d, cfg.norm_eps, p)?,
            lm_head,
        })
    }

    /// Give every block random down-projections (N(0, std^2)), seeded.
    pub fn randomize_adapters(&mut self, std: f64, seed: u64) -> Result<()> {
        let root = Rng::new(seed);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            b.randomize_down_projections(std, &mut root.fork(l as u64))?;
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            token_embedding: self.token_embedding.zeros_like(),
            position_embedding: self.position_embedding.zeros_like(),
            blocks: self.blocks.iter().map(BlockParams::zeros_like).collect(),
            final_norm: self.final_norm.zeros_like(),
            lm_head: self.lm_head.zeros_like(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn d_model(&self) -> usize {
        self.token_embedding.shape()[1]
    }

    pub fn scalar_count(&self) -> usize {
        crate::params::named_tensors(self).iter().map(|(_, _, t)| t.numel()).sum()
    }
}

/// Token ids laid out `[batch x seq]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    batch: usize,
    seq: usize,
    ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<usize>) -> Result<Self> {
        if batch == 0 || seq == 0 || ids.len() != batch * seq {
            return Err(Error::InvalidShape {
                shape: vec![batch, seq],
                reason: format!("{} token ids", ids.len()),
            });
        }
        Ok(Self { batch, seq, ids })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Uniform random ids, for measurement runs.
    pub fn random(batch: usize, seq: usize, vocab: usize, rng: &mut Rng) -> Result<Self> {
        Self::new(batch, seq, (0..batch * seq).map(|_| rng.below(vocab)).collect())
    }
}

/// `[B x S x vocab]` scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(pub Tensor);

impl Logits {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

fn check_tokens(tokens: &TokenBatch, cfg: &ModelConfig) -> Result<()> {
    if tokens.seq > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.seq,
            max: cfg.max_seq_len,
        });
    }
    if let Some(&id) = tokens.ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

fn embed(tokens: &TokenBatch, params: &ModelParams, cfg: &ModelConfig) -> Result<Tensor> {
    check_tokens(tokens, cfg)?;
    let d = params.d_model();
    let mut h = Vec::with_capacity(tokens.len() * d);
    for (i, &id) in tokens.ids.iter().enumerate() {
        let pos = i % tokens.seq;
        let tok = params.token_embedding.row(id);
        let p = params.position_embedding.row(pos);
        h.extend(tok.iter().zip(p).map(|(a, b)| a + b));
    }
    Tensor::build("embed", vec![tokens.batch, tokens.seq, d], h, cfg.precision)
}

fn embed_backward(tokens: &TokenBatch, grad_h: &Tensor, grads: &mut ModelParams) -> Result<()> {
    let d = grad_h.last_dim();
    let prec = grad_h.precision();
    let mut tok = grads.token_embedding.zeros_like().into_data();
    let mut pos = grads.position_embedding.zeros_like().into_data();
    for (i, &id) in tokens.ids.iter().enumerate() {
        let g = grad_h.row(i);
        let p = i % tokens.seq;
        for j in 0..d {
            tok[id * d + j] += g[j];
            pos[p * d + j] += g[j];
        }
    }
    grads.token_embedding = Tensor::build("embed_vjp", grads.token_embedding.shape().to_vec(), tok, prec)?;
    grads.position_embedding =
        Tensor::build("embed_vjp", grads.position_embedding.shape().to_vec(), pos, prec)?;
    Ok(())
}

fn head(boundary: &StreamPair, params: &ModelParams, tape: Option<&mut GradTape>) -> Result<Tensor> {
    let mut tape = tape;
    let h = concat(boundary)?;
    let n = rmsnorm_fwd(&h, &params.final_norm, tape.as_deref_mut())?;
    linear_fwd(&n, &params.lm_head, tape)
}

/// Forward result. Only the boundary pair is kept for a reversible backward.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Logits,
    pub boundary: StreamPair,
}

/// `embed -> split -> blocks -> concat -> final_norm -> lm_head`, retaining no block inputs.
pub fn model_fwd(tokens: &TokenBatch, params: &ModelParams, cfg: &ModelConfig) -> Result<ForwardOutput> {
    let mut x = split(&embed(tokens, params, cfg)?)?;
    for b in &params.blocks {
        x = block_fwd(&x, b, cfg.coupling)?;
    }
    let logits = head(&x, params, None)?;
    Ok(ForwardOutput {
        logits: Logits(logits),
        boundary: x,
    })
}

/// Mean token cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Tensor, targets: &TokenBatch) -> Result<(f64, Tensor)> {
    let v = logits.last_dim();
    let n = logits.rows();
    if targets.len() != n {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.batch, targets.seq],
        });
    }
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(n * v);
    for (r, &t) in targets.ids.iter().enumerate() {
        if t >= v {
            return Err(Error::TokenOutOfRange { id: t, vocab: v });
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[t];
        for (j, x) in row.iter().enumerate() {
            let p = (x - lse).exp();
            grad.push((p - if j == t { 1.0 } else { 0.0 }) / n as f64);
        }
    }
    let loss = logits.precision().round(total / n as f64);
    Ok((loss, Tensor::build("cross_entropy", logits.shape().to_vec(), grad, logits.precision())?))
}

/// Mean cross-entropy of `model_fwd`.
pub fn model_loss(tokens: &TokenBatch, targets: &TokenBatch, params: &ModelParams, cfg: &ModelConfig) -> Result<f64> {
    let out = model_fwd(tokens, params, cfg)?;
    Ok(cross_entropy(&out.logits.0, targets)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Reversible,
    Caching,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Reversible => "reversible",
            Strategy::Caching => "caching",
        }
    }
}

/// Scalars retained between the forward and backward pass.
///
/// `scalars_cached_per_layer` counts block inputs stored by the forward pass;
/// `scalars_cached_peak` is their total. `boundary_scalars` is the final
/// stream pair, which both strategies hold for the head. Transient tapes
/// built inside one block backward are reported separately.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationLedger {
    pub strategy: Strategy,
    pub scalars_cached_per_layer: Vec<usize>,
    pub scalars_cached_peak: usize,
    pub boundary_scalars: usize,
    pub transient_peak_scalars: usize,
}

impl ActivationLedger {
    /// Activations the block stack needs to run its backward: the boundary
    /// pair seeds the reversible walk, cached inputs serve the caching one.
    pub fn inter_block_scalars(&self) -> usize {
        match self.strategy {
            Strategy::Reversible => self.boundary_scalars + self.scalars_cached_peak,
            Strategy::Caching => self.scalars_cached_peak,
        }
    }
}

/// Loss, gradients and accounting of one backward pass.
#[derive(Debug, Clone)]
pub struct BackwardOutput {
    pub loss: f64,
    pub grads: ModelParams,
    pub ledger: ActivationLedger,
    /// Per-layer reconstruction residual (zero for the caching strategy).
    pub recon_errors: Vec<f64>,
}

impl BackwardOutput {
    pub fn max_recon_error(&self) -> f64 {
        self.recon_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Head forward + loss + head backward. Returns the loss and the boundary gradient.
fn head_backward(
    boundary: &StreamPair,
    targets: &TokenBatch,
    params: &ModelParams,
    grads: &mut ModelParams,
) -> Result<(f64, StreamPair)> {
    let mut tape = GradTape::new();
    let logits = head(boundary, params, Some(&mut tape))?;
    let (loss, dlogits) = cross_entropy(&logits, targets)?;
    let (dn, g_head) = linear_vjp(&params.lm_head, &mut tape, &dlogits)?;
    let (dh, g_norm) = rmsnorm_vjp(&params.final_norm, &mut tape, &dn)?;
    grads.lm_head = g_head;
    grads.final_norm = g_norm;
    Ok((loss, split(&dh)?))
}

fn finish(
    tokens: &TokenBatch,
    grad_x0: &StreamPair,
    mut grads: ModelParams,
    mask: Option<&TrainableMask>,
) -> Result<ModelParams> {
    embed_backward(tokens, &concat(grad_x0)?, &mut grads)?;
    if let Some(m) = mask {
        m.apply(&mut grads)?;
    }
    Ok(grads)
}

/// Backward that reconstructs each block input from its output.
pub fn model_bwd_reversible(
    tokens: &TokenBatch,
    targets: &TokenBatch,
    params: &ModelParams,
    cfg: &ModelConfig,
    mask: Option<&TrainableMask>,
) -> Result<BackwardOutput> {
    let ForwardOutput { boundary, .. } = model_fwd(tokens, params, cfg)?;
    let n_layers = params.n_layers();
    let boundary_scalars = boundary.numel();
    let mut grads = params.zeros_like();
    let (loss, mut gy) = head_backward(&boundary, targets, params, &mut grads)?;

    let opts = cfg.inverse_options();
    let mut y = boundary;
    let mut recon_errors = vec![0.0; n_layers];
    let mut transient = 0;
    for l in (0..n_layers).rev() {
        let out = block_vjp(&y, &gy, &params.blocks[l], cfg.coupling, opts).map_err(|e| e.at_layer(l))?;
        recon_errors[l] = out.recon_error;
        transient = transient.max(out.tape_peak_scalars);
        grads.blocks[l] = out.grad_params;
        y = out.x;
        gy = out.grad_x;
    }
    let grads = finish(tokens, &gy, grads, mask)?;
    Ok(BackwardOutput {
        loss,
        grads,
        ledger: ActivationLedger {
            strategy: Strategy::Reversible,
            scalars_cached_per_layer: vec![0; n_layers],
            scalars_cached_peak: 0,
            boundary_scalars,
            transient_peak_scalars: transient,
        },
        recon_errors,
    })
}

/// Backward that stores every block input during the forward pass.
pub fn model_bwd_caching(
    tokens: &TokenBatch,
    targets: &TokenBatch,
    params: &ModelParams,
    cfg: &ModelConfig,
    mask: Option<&TrainableMask>,
) -> Result<BackwardOutput> {
    let mut x = split(&embed(tokens, params, cfg)?)?;
    let mut cache: Vec<StreamPair> = Vec::with_capacity(params.n_layers());
    for b in &params.blocks {
        let next = block_fwd(&x, b, cfg.coupling)?;
        cache.push(x);
        x = next;
    }
    let per_layer: Vec<usize> = cache.iter().map(StreamPair::numel).collect();
    let peak = per_layer.iter().sum();
    let boundary_scalars = x.numel();

    let mut grads = params.zeros_like();
    let (loss, mut gy) = head_backward(&x, targets, params, &mut grads)?;
    drop(x);
    let mut transient = 0;
    for l in (0..params.n_layers()).rev() {
        let input = cache.pop().expect("one cached input per layer");
        let out = block_vjp_from_input(input, &gy, &params.blocks[l], cfg.coupling)?;
        transient = transient.max(out.tape_peak_scalars);
        grads.blocks[l] = out.grad_params;
        gy = out.grad_x;
    }
    let grads = finish(tokens, &gy, grads, mask)?;
    Ok(BackwardOutput {
        loss,
        grads,
        ledger: ActivationLedger {
            strategy: Strategy::Caching,
            scalars_cached_per_layer: per_layer,
            scalars_cached_peak: peak,
            boundary_scalars,
            transient_peak_scalars: transient,
        },
        recon_errors: vec![0.0; params.n_layers()],
    })
}

/// One strategy's row of a memory report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRow {
    pub strategy: Strategy,
    pub analytic_inter_block: usize,
    pub measured_inter_block: usize,
    pub scalars_cached_per_layer: Vec<usize>,
    pub boundary_scalars: usize,
    pub transient_peak_scalars: usize,
}

/// Inter-block activation counts of both strategies at one model depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub n_layers: usize,
    pub batch: usize,
    pub seq: usize,
    pub d_model: usize,
    pub reversible: MemoryRow,
    pub caching: MemoryRow,
    /// reversible / caching inter-block count; `None` for an empty stack.
    pub ratio: Option<f64>,
}

/// Count and measure activation storage for `cfg` at the given batch shape.
pub fn memory_report(cfg: &ModelConfig, batch: usize, seq: usize) -> Result<MemoryReport> {
    cfg.validate()?;
    let params = ModelParams::init(cfg)?;
    let mut rng = Rng::new(cfg.seed).fork(0x6d656d);
    let tokens = TokenBatch::random(batch, seq, cfg.vocab_size, &mut rng)?;
    let targets = TokenBatch::random(batch, seq, cfg.vocab_size, &mut rng)?;
    let rev = model_bwd_reversible(&tokens, &targets, &params, cfg, None)?.ledger;
    let cac = model_bwd_caching(&tokens, &targets, &params, cfg, None)?.ledger;
    let pair = batch * seq * cfg.d_model;
    let row = |l: ActivationLedger, analytic: usize| MemoryRow {
        strategy: l.strategy,
        analytic_inter_block: analytic,
        measured_inter_block: l.inter_block_scalars(),
        scalars_cached_per_layer: l.scalars_cached_per_layer.clone(),
        boundary_scalars: l.boundary_scalars,
        transient_peak_scalars: l.transient_peak_scalars,
    };
    let reversible = row(rev, pair);
    let caching = row(cac, pair * cfg.n_layers);
    let ratio = (caching.measured_inter_block > 0)
        .then(|| reversible.measured_inter_block as f64 / caching.measured_inter_block as f64);
    Ok(MemoryReport {
        n_layers: cfg.n_layers,
        batch,
        seq,
        d_model: cfg.d_model,
        reversible,
        caching,
        ratio,
    })
}
