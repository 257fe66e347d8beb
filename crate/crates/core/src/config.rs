//! JSON run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::block::CouplingVariant;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, Strategy};
use crate::tensor::Precision;
use crate::train::{ablation_masks, AdamConfig, LoopOptions, StageSpec, ToyCorpus};

/// Which stage sequence to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Full,
    NoStage1,
    ProjectionsOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageHyper {
    pub learning_rate: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub schedule: Schedule,
    pub stage1: StageHyper,
    pub stage2: StageHyper,
    pub batch_size: usize,
    pub eval_every: usize,
    pub eval_batch_size: usize,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    pub train_embeddings_and_head: bool,
    pub strategy: Strategy,
    pub adam: AdamConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusConfig {
    /// Synthetic copy task.
    Copy {
        seq_len: usize,
        n_train: usize,
        n_eval: usize,
        seed: u64,
    },
    /// One whitespace-separated id sequence per line.
    File {
        path: PathBuf,
        seq_len: usize,
        eval_fraction: f64,
        seed: u64,
    },
}

impl CorpusConfig {
    pub fn seq_len(&self) -> usize {
        match self {
            CorpusConfig::Copy { seq_len, .. } | CorpusConfig::File { seq_len, .. } => *seq_len,
        }
    }

    pub fn load(&self, vocab_size: usize) -> Result<ToyCorpus> {
        match self {
            CorpusConfig::Copy {
                seq_len,
                n_train,
                n_eval,
                seed,
            } => ToyCorpus::copy_task(vocab_size, *seq_len, *n_train, *n_eval, *seed),
            CorpusConfig::File {
                path,
                seq_len,
                eval_fraction,
                seed,
            } => ToyCorpus::from_file(path, vocab_size, *seq_len, *eval_fraction, *seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportFormats {
    pub text: bool,
    pub json: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub corpus: CorpusConfig,
    pub output_dir: PathBuf,
    pub reports: ReportFormats,
}

/// Command-line overrides applied on top of a file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
    pub coupling: Option<CouplingVariant>,
    pub inv_iters: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                d_model: 32,
                n_heads: 4,
                d_ff: 64,
                // Exactly invertible; the paper coupling's fixed-point inverse
                // stops contracting once warm-up grows the attention adapters.
                coupling: CouplingVariant::StrictRevnet,
                ..ModelConfig::tiny()
            },
            training: TrainingConfig {
                schedule: Schedule::Full,
                stage1: StageHyper {
                    learning_rate: 1e-3,
                    steps: 200,
                },
                stage2: StageHyper {
                    learning_rate: 3e-4,
                    steps: 300,
                },
                batch_size: 8,
                eval_every: 50,
                eval_batch_size: 32,
                checkpoint_every: 100,
                train_embeddings_and_head: true,
                strategy: Strategy::Reversible,
                adam: AdamConfig::default(),
            },
            corpus: CorpusConfig::Copy {
                seq_len: 16,
                n_train: 512,
                n_eval: 64,
                seed: 0,
            },
            output_dir: PathBuf::from("runs/default"),
            reports: ReportFormats { text: true, json: true },
        }
    }
}

impl RunConfig {
    /// Read a JSON config; `None` gives the built-in default.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?),
            None => Ok(Self::default()),
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.model.seed = s;
        }
        if let Some(p) = o.precision {
            self.model.precision = p;
        }
        if let Some(c) = o.coupling {
            self.model.coupling = c;
        }
        if let Some(n) = o.inv_iters {
            self.model.inv_iters = n;
        }
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
    }

    /// Validate everything that can be checked before compute.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.training;
        for (field, h) in [("training.stage1", t.stage1), ("training.stage2", t.stage2)] {
            if !(h.learning_rate > 0.0 && h.learning_rate.is_finite()) {
                return Err(Error::config(format!("{field}.learning_rate"), "must be a positive finite number"));
            }
            if h.steps == 0 {
                return Err(Error::config(format!("{field}.steps"), "must be positive"));
            }
        }
        if t.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be positive"));
        }
        if t.eval_batch_size == 0 {
            return Err(Error::config("training.eval_batch_size", "must be positive"));
        }
        let a = t.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return Err(Error::config("training.adam", "betas must be in [0, 1)"));
        }
        if a.eps.is_nan() || a.eps <= 0.0 {
            return Err(Error::config("training.adam.eps", "must be positive"));
        }
        let s = self.corpus.seq_len();
        if s == 0 || s > self.model.max_seq_len {
            return Err(Error::config(
                "corpus.seq_len",
                format!("must be in 1..={} (model.max_seq_len)", self.model.max_seq_len),
            ));
        }
        Ok(())
    }

    pub fn loop_options(&self) -> LoopOptions {
        let t = &self.training;
        LoopOptions {
            batch_size: t.batch_size,
            eval_every: t.eval_every,
            eval_batch_size: t.eval_batch_size,
            strategy: t.strategy,
            adam: t.adam,
        }
    }

    /// Stage list for the configured schedule.
    pub fn stages(&self, p: &ModelParams) -> Vec<StageSpec> {
        let t = &self.training;
        let s1 = StageSpec::adapter_warmup(p, t.stage1.learning_rate, t.stage1.steps);
        let s2 = StageSpec::joint_fine_tune(p, t.stage2.learning_rate, t.stage2.steps, t.train_embeddings_and_head);
        let a = ablation_masks(p, &s1, &s2);
        match t.schedule {
            Schedule::Full => a.full,
            Schedule::NoStage1 => a.no_stage1,
            Schedule::ProjectionsOnly => a.projections_only,
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
