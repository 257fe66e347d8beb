//! Two-stage fine-tuning: adapter warm-up, then joint fine-tuning with frozen
//! routers. Includes a masked Adam, a synthetic copy corpus and the step loop.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{cross_entropy, model_bwd_caching, model_bwd_reversible, model_fwd, ModelConfig, ModelParams, Strategy, TokenBatch};
use crate::params::{fingerprint, named_tensors, named_tensors_mut, ParamGroup, TrainableMask};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    AdapterWarmup,
    JointFineTune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::AdapterWarmup => "adapter_warmup",
            Stage::JointFineTune => "joint_fine_tune",
        }
    }
}

/// One phase of a schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSpec {
    pub stage: Stage,
    pub learning_rate: f64,
    pub steps: usize,
    pub trainable_mask: TrainableMask,
}

impl StageSpec {
    /// Train the up/down projection adapters only.
    pub fn adapter_warmup(p: &ModelParams, learning_rate: f64, steps: usize) -> Self {
        Self {
            stage: Stage::AdapterWarmup,
            learning_rate,
            steps,
            trainable_mask: TrainableMask::from_groups(p, ParamGroup::is_adapter),
        }
    }

    /// Train everything except router gates. With `embeddings_and_head` false the
    /// token/position embeddings and LM head stay frozen as well.
    pub fn joint_fine_tune(p: &ModelParams, learning_rate: f64, steps: usize, embeddings_and_head: bool) -> Self {
        Self {
            stage: Stage::JointFineTune,
            learning_rate,
            steps,
            trainable_mask: TrainableMask::from_groups(p, |g| match g {
                ParamGroup::Router => false,
                ParamGroup::Embedding | ParamGroup::Head => embeddings_and_head,
                _ => true,
            }),
        }
    }

    /// Check hyperparameters and that the mask matches the stage's contract.
    pub fn validate(&self, p: &ModelParams) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be a positive finite number"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be positive"));
        }
        self.trainable_mask.validate(p)?;
        for (name, group, _) in named_tensors(p) {
            let trainable = self.trainable_mask.is_trainable(&name)?;
            let allowed = match (self.stage, group) {
                (Stage::AdapterWarmup, g) => g.is_adapter() == trainable,
                (Stage::JointFineTune, ParamGroup::Router) => !trainable,
                (Stage::JointFineTune, ParamGroup::Embedding | ParamGroup::Head) => true,
                (Stage::JointFineTune, _) => trainable,
            };
            if !allowed {
                return Err(Error::config(
                    "trainable_mask",
                    format!("`{name}` violates the {} contract", self.stage.as_str()),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ModelParams,
    pub v: ModelParams,
}

impl AdamState {
    pub fn new(p: &ModelParams, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: p.zeros_like(),
            v: p.zeros_like(),
        }
    }
}

/// One bias-corrected Adam update. Frozen parameters and their moments are
/// left untouched. Any non-finite gradient rejects the whole step before
/// anything is modified.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    learning_rate: f64,
    mask: &TrainableMask,
) -> Result<()> {
    let grads = named_tensors(grads);
    if grads.len() != named_tensors(params).len() {
        return Err(Error::config("grads", "do not mirror the parameter set"));
    }
    for (name, _, g) in &grads {
        if g.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    mask.validate(params)?;

    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);

    let ps = named_tensors_mut(params);
    let ms = named_tensors_mut(&mut state.m);
    let vs = named_tensors_mut(&mut state.v);
    for (((name, _, p), (_, _, g)), ((_, _, m), (_, _, v))) in ps.into_iter().zip(grads).zip(ms.into_iter().zip(vs)) {
        if !mask.is_trainable(&name)? {
            continue;
        }
        if p.shape() != g.shape() || m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let prec = p.precision();
        let n = p.numel();
        let (mut pn, mut mn, mut vn) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            let gi = g.data()[i];
            let mi = beta1 * m.data()[i] + (1.0 - beta1) * gi;
            let vi = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
            let update = learning_rate * (mi / c1) / ((vi / c2).sqrt() + eps);
            pn.push(p.data()[i] - update);
            mn.push(mi);
            vn.push(vi);
        }
        let shape = p.shape().to_vec();
        *m = Tensor::build("adam_step", shape.clone(), mn, prec)?;
        *v = Tensor::build("adam_step", shape.clone(), vn, prec)?;
        *p = Tensor::build("adam_step", shape, pn, prec)?;
    }
    Ok(())
}

/// Padding id; never a copy symbol.
pub const PAD: usize = 0;
/// Separator between a prefix and its copy.
pub const SEP: usize = 1;

/// Token sequences of length `seq_len + 1`, split into train and eval sets.
/// A model sees `seq[..seq_len]` and predicts `seq[1..]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyCorpus {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub train: Vec<Vec<usize>>,
    pub eval: Vec<Vec<usize>>,
}

impl ToyCorpus {
    /// Copy task: random symbols, `SEP`, the same symbols again.
    pub fn copy_task(vocab_size: usize, seq_len: usize, n_train: usize, n_eval: usize, seed: u64) -> Result<Self> {
        if vocab_size < 3 {
            return Err(Error::config("vocab_size", "copy task needs at least 3 ids"));
        }
        if seq_len < 2 {
            return Err(Error::config("seq_len", "copy task needs at least 2 positions"));
        }
        let mut rng = Rng::new(seed).fork(0xc0);
        let half = seq_len / 2;
        let sequences = (0..n_train + n_eval)
            .map(|_| {
                let prefix: Vec<usize> = (0..half).map(|_| 2 + rng.below(vocab_size - 2)).collect();
                let mut s = prefix.clone();
                s.push(SEP);
                s.extend(&prefix);
                s.resize(seq_len + 1, PAD);
                s
            })
            .collect();
        Self::split(vocab_size, seq_len, sequences, n_eval, seed)
    }

    /// One sequence of whitespace-separated ids per line. Shorter lines are
    /// padded, longer ones truncated to `seq_len + 1`.
    pub fn from_file(path: &Path, vocab_size: usize, seq_len: usize, eval_fraction: f64, seed: u64) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut sequences = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut s = Vec::new();
            for tok in line.split_whitespace() {
                let id: usize = tok
                    .parse()
                    .map_err(|_| Error::config("corpus", format!("line {}: `{tok}` is not a token id", line_no + 1)))?;
                if id >= vocab_size {
                    return Err(Error::TokenOutOfRange { id, vocab: vocab_size });
                }
                s.push(id);
            }
            s.resize(seq_len + 1, PAD);
            sequences.push(s);
        }
        if !(0.0..1.0).contains(&eval_fraction) {
            return Err(Error::config("eval_fraction", "must be in [0, 1)"));
        }
        let n_eval = ((sequences.len() as f64) * eval_fraction).round() as usize;
        Self::split(vocab_size, seq_len, sequences, n_eval, seed)
    }

    fn split(vocab_size: usize, seq_len: usize, mut sequences: Vec<Vec<usize>>, n_eval: usize, seed: u64) -> Result<Self> {
        if n_eval == 0 || sequences.len() <= n_eval {
            return Err(Error::config("corpus", "needs non-empty train and eval splits"));
        }
        // Fisher-Yates with the corpus seed.
        let mut rng = Rng::new(seed).fork(0x5b17);
        for i in (1..sequences.len()).rev() {
            let j = rng.below(i + 1);
            sequences.swap(i, j);
        }
        let eval = sequences.split_off(sequences.len() - n_eval);
        Ok(Self {
            vocab_size,
            seq_len,
            train: sequences,
            eval,
        })
    }

    fn batch_of(&self, seqs: &[&Vec<usize>]) -> Result<(TokenBatch, TokenBatch)> {
        let s = self.seq_len;
        let inputs = seqs.iter().flat_map(|q| q[..s].iter().copied()).collect();
        let targets = seqs.iter().flat_map(|q| q[1..].iter().copied()).collect();
        Ok((TokenBatch::new(seqs.len(), s, inputs)?, TokenBatch::new(seqs.len(), s, targets)?))
    }

    /// Training batch for a global step; a pure function of `(seed, step)`.
    pub fn train_batch(&self, step: usize, batch_size: usize, seed: u64) -> Result<(TokenBatch, TokenBatch)> {
        let mut rng = Rng::new(seed).fork(0x7a1 ^ ((step as u64) << 16));
        let picks: Vec<&Vec<usize>> = (0..batch_size).map(|_| &self.train[rng.below(self.train.len())]).collect();
        self.batch_of(&picks)
    }

    /// The eval split in fixed order, chunked.
    pub fn eval_batches(&self, batch_size: usize) -> Result<Vec<(TokenBatch, TokenBatch)>> {
        let all: Vec<&Vec<usize>> = self.eval.iter().collect();
        all.chunks(batch_size.max(1)).map(|c| self.batch_of(c)).collect()
    }
}

/// Mean token cross-entropy over the eval split.
pub fn eval_loss(params: &ModelParams, cfg: &ModelConfig, corpus: &ToyCorpus, batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (x, y) in corpus.eval_batches(batch_size)? {
        let out = model_fwd(&x, params, cfg)?;
        let (loss, _) = cross_entropy(&out.logits.0, &y)?;
        total += loss * y.len() as f64;
        count += y.len();
    }
    Ok(total / count as f64)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        step: usize,
        stage: Stage,
        loss: f64,
        max_recon_error: f64,
        ledger_peak: usize,
        transient_peak: usize,
    },
    Eval {
        step: usize,
        stage: Stage,
        eval_loss: f64,
    },
}

impl LogRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log records serialize")
    }
}

/// Hashes of parameter groups, taken at stage boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprints {
    pub backbone: u64,
    pub adapters: u64,
    pub routers: u64,
    pub experts: u64,
}

impl Fingerprints {
    pub fn of(p: &ModelParams) -> Self {
        Self {
            backbone: fingerprint(p, |g| !g.is_adapter()),
            adapters: fingerprint(p, ParamGroup::is_adapter),
            routers: fingerprint(p, |g| g == ParamGroup::Router),
            experts: fingerprint(p, |g| g == ParamGroup::Expert),
        }
    }
}

/// Loop settings that are not part of the schedule itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopOptions {
    pub batch_size: usize,
    /// Eval every this many steps (0: only at the end of each stage).
    pub eval_every: usize,
    pub eval_batch_size: usize,
    pub strategy: Strategy,
    pub adam: AdamConfig,
}

impl Default for LoopOptions {
    fn default() -> Self {
        Self {
            batch_size: 8,
            eval_every: 0,
            eval_batch_size: 32,
            strategy: Strategy::Reversible,
            adam: AdamConfig::default(),
        }
    }
}

/// The step loop over a multi-stage schedule. Steps are numbered globally;
/// the optimizer is reset at each stage boundary.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: ModelConfig,
    pub params: ModelParams,
    pub schedule: Vec<StageSpec>,
    pub options: LoopOptions,
    pub adam: AdamState,
    /// Next global step to run.
    pub step: usize,
    pub log: Vec<LogRecord>,
    /// Fingerprints at the start of each stage plus one at the end.
    pub fingerprints: Vec<Fingerprints>,
}

impl Trainer {
    pub fn new(cfg: ModelConfig, params: ModelParams, schedule: Vec<StageSpec>, options: LoopOptions) -> Result<Self> {
        cfg.validate()?;
        if schedule.is_empty() {
            return Err(Error::config("schedule", "needs at least one stage"));
        }
        for s in &schedule {
            s.validate(&params)?;
        }
        if options.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        let adam = AdamState::new(&params, options.adam);
        Ok(Self {
            cfg,
            params,
            schedule,
            options,
            adam,
            step: 0,
            log: Vec::new(),
            fingerprints: Vec::new(),
        })
    }

    pub fn total_steps(&self) -> usize {
        self.schedule.iter().map(|s| s.steps).sum()
    }

    /// Stage index and step offset within it for a global step.
    pub fn locate(&self, step: usize) -> Option<(usize, usize)> {
        let mut start = 0;
        for (i, s) in self.schedule.iter().enumerate() {
            if step < start + s.steps {
                return Some((i, step - start));
            }
            start += s.steps;
        }
        None
    }

    pub fn done(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// Run one global step, returning the records it produced.
    pub fn step_once(&mut self, corpus: &ToyCorpus) -> Result<Vec<LogRecord>> {
        let Some((si, offset)) = self.locate(self.step) else {
            return Ok(Vec::new());
        };
        let step = self.step;
        if offset == 0 {
            self.adam = AdamState::new(&self.params, self.options.adam);
            self.fingerprints.push(Fingerprints::of(&self.params));
        }
        let spec = &self.schedule[si];
        let (x, y) = corpus.train_batch(step, self.options.batch_size, self.cfg.seed)?;
        let mask = Some(&spec.trainable_mask);
        let out = match self.options.strategy {
            Strategy::Reversible => model_bwd_reversible(&x, &y, &self.params, &self.cfg, mask),
            Strategy::Caching => model_bwd_caching(&x, &y, &self.params, &self.cfg, mask),
        }
        .map_err(|e| e.at_step(step))?;
        adam_step(&mut self.params, &out.grads, &mut self.adam, spec.learning_rate, &spec.trainable_mask)?;

        let mut records = vec![LogRecord::Step {
            step,
            stage: spec.stage,
            loss: out.loss,
            max_recon_error: out.max_recon_error(),
            ledger_peak: out.ledger.inter_block_scalars(),
            transient_peak: out.ledger.transient_peak_scalars,
        }];
        let stage_end = offset + 1 == spec.steps;
        let periodic = self.options.eval_every > 0 && (step + 1).is_multiple_of(self.options.eval_every);
        if stage_end || periodic {
            records.push(LogRecord::Eval {
                step,
                stage: spec.stage,
                eval_loss: eval_loss(&self.params, &self.cfg, corpus, self.options.eval_batch_size)?,
            });
        }
        self.step += 1;
        if self.done() {
            self.fingerprints.push(Fingerprints::of(&self.params));
        }
        self.log.extend(records.iter().cloned());
        Ok(records)
    }

    pub fn run(&mut self, corpus: &ToyCorpus) -> Result<()> {
        while !self.done() {
            self.step_once(corpus)?;
        }
        Ok(())
    }

    /// Per-step training losses logged so far.
    pub fn losses(&self) -> Vec<f64> {
        self.log
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { loss, .. } => Some(*loss),
                LogRecord::Eval { .. } => None,
            })
            .collect()
    }
}

/// Result of [`run_two_stage`].
#[derive(Debug, Clone)]
pub struct TwoStageReport {
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
    pub log: Vec<LogRecord>,
    /// Before stage 1, after stage 1, after stage 2.
    pub fingerprints: [Fingerprints; 3],
    pub params: ModelParams,
}

/// Adapter warm-up followed by joint fine-tuning.
pub fn run_two_stage(
    cfg: &ModelConfig,
    params: ModelParams,
    stage1: StageSpec,
    stage2: StageSpec,
    corpus: &ToyCorpus,
    options: LoopOptions,
) -> Result<TwoStageReport> {
    if stage1.stage != Stage::AdapterWarmup || stage2.stage != Stage::JointFineTune {
        return Err(Error::config("schedule", "expects adapter_warmup then joint_fine_tune"));
    }
    let initial_eval_loss = eval_loss(&params, cfg, corpus, options.eval_batch_size)?;
    let mut t = Trainer::new(cfg.clone(), params, vec![stage1, stage2], options)?;
    t.run(corpus)?;
    let final_eval_loss = eval_loss(&t.params, cfg, corpus, options.eval_batch_size)?;
    let fingerprints = [t.fingerprints[0], t.fingerprints[1], t.fingerprints[2]];
    Ok(TwoStageReport {
        initial_eval_loss,
        final_eval_loss,
        log: t.log,
        fingerprints,
        params: t.params,
    })
}

/// Schedules for the ablation study, sharing one step budget.
#[derive(Debug, Clone)]
pub struct Ablations {
    pub full: Vec<StageSpec>,
    pub no_stage1: Vec<StageSpec>,
    pub projections_only: Vec<StageSpec>,
}

/// `full` is warm-up then joint; `no_stage1` is joint for the whole budget;
/// `projections_only` trains adapters for the whole budget.
pub fn ablation_masks(p: &ModelParams, stage1: &StageSpec, stage2: &StageSpec) -> Ablations {
    let budget = stage1.steps + stage2.steps;
    Ablations {
        full: vec![stage1.clone(), stage2.clone()],
        no_stage1: vec![StageSpec {
            steps: budget,
            ..stage2.clone()
        }],
        projections_only: vec![StageSpec {
            steps: budget,
            ..StageSpec::adapter_warmup(p, stage1.learning_rate, budget)
        }],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (ModelConfig, ModelParams) {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            d_ff: 16,
            ..ModelConfig::tiny()
        };
        let p = ModelParams::init(&cfg).unwrap();
        (cfg, p)
    }

    #[test]
    fn adam_single_scalar_by_hand() {
        let (_, mut p) = tiny();
        let mut g = p.zeros_like();
        g.lm_head.weight = Tensor::full(g.lm_head.weight.shape(), 1.0, g.lm_head.weight.precision()).unwrap();
        let mask = TrainableMask::from_groups(&p, |grp| grp == ParamGroup::Head);
        let before = p.lm_head.weight.data()[0];
        let mut st = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &g, &mut st, 0.1, &mask).unwrap();
        // m_hat = v_hat = 1 after one step.
        let expected = before - 0.1 / (1.0 + 1e-8);
        assert_eq!(p.lm_head.weight.data()[0], expected);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_grads_and_frozen_params() {
        let (_, mut p) = tiny();
        let orig = p.clone();
        let g = p.zeros_like();
        let all = TrainableMask::from_groups(&p, |_| true);
        let mut st = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &g, &mut st, 0.1, &all).unwrap();
        assert_eq!(st.step, 1);
        assert_eq!(fingerprint(&p, |_| true), fingerprint(&orig, |_| true));

        let mut g = p.zeros_like();
        g.token_embedding = Tensor::full(g.token_embedding.shape(), 3.0, g.token_embedding.precision()).unwrap();
        let none = TrainableMask::from_groups(&p, |_| false);
        adam_step(&mut p, &g, &mut st, 0.1, &none).unwrap();
        assert!(p.token_embedding.bitwise_eq(&orig.token_embedding));
        assert_eq!(st.m.token_embedding.max_abs(), 0.0);
    }

    #[test]
    fn stage_masks_validate() {
        let (_, p) = tiny();
        let s1 = StageSpec::adapter_warmup(&p, 1e-3, 3);
        let s2 = StageSpec::joint_fine_tune(&p, 3e-4, 3, true);
        s1.validate(&p).unwrap();
        s2.validate(&p).unwrap();
        StageSpec::joint_fine_tune(&p, 3e-4, 3, false).validate(&p).unwrap();
        let bad = StageSpec {
            stage: Stage::AdapterWarmup,
            ..s2.clone()
        };
        assert!(matches!(bad.validate(&p), Err(Error::Config { .. })));
        let zero = StageSpec { steps: 0, ..s1 };
        assert!(zero.validate(&p).is_err());
    }

    #[test]
    fn corpus_is_a_copy_task_and_reproducible() {
        let c = ToyCorpus::copy_task(64, 9, 20, 5, 3).unwrap();
        assert_eq!(c, ToyCorpus::copy_task(64, 9, 20, 5, 3).unwrap());
        assert_eq!(c.eval.len(), 5);
        for s in c.train.iter().chain(&c.eval) {
            assert_eq!(s.len(), 10);
            assert_eq!(s[4], SEP);
            assert_eq!(&s[..4], &s[5..9]);
            assert!(s.iter().all(|&id| id < 64));
        }
        let (a, _) = c.train_batch(7, 4, 1).unwrap();
        let (b, _) = c.train_batch(7, 4, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ablations_are_built_from_the_stages() {
        let (_, p) = tiny();
        let s1 = StageSpec::adapter_warmup(&p, 1e-3, 2);
        let s2 = StageSpec::joint_fine_tune(&p, 3e-4, 5, true);
        let a = ablation_masks(&p, &s1, &s2);
        assert_eq!(a.no_stage1.len(), 1);
        assert_eq!(a.no_stage1[0].trainable_mask, s2.trainable_mask);
        assert_eq!(a.no_stage1[0].steps, 7);
        assert_eq!(a.projections_only[0].steps, 7);
        assert_eq!(a.projections_only[0].trainable_mask, s1.trainable_mask);
    }

    #[test]
    fn two_stage_contracts() {
        let (cfg, p) = tiny();
        let corpus = ToyCorpus::copy_task(cfg.vocab_size, 8, 32, 8, 0).unwrap();
        let s1 = StageSpec::adapter_warmup(&p, 1e-3, 3);
        let s2 = StageSpec::joint_fine_tune(&p, 3e-4, 3, true);
        let r = run_two_stage(&cfg, p, s1, s2, &corpus, LoopOptions::default()).unwrap();
        let [f0, f1, f2] = r.fingerprints;
        assert_eq!(f0.backbone, f1.backbone);
        assert_ne!(f0.adapters, f1.adapters);
        assert_eq!(f1.routers, f2.routers);
        assert_ne!(f1.experts, f2.experts);
        assert_eq!(r.log.iter().filter(|l| matches!(l, LogRecord::Step { .. })).count(), 6);
    }
}
