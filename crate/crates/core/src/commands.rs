//! Command-line surface: argument definitions, the five commands, and report output.
//!
//! Every command returns a [`Report`] holding a plain-text table and a JSON
//! copy. Reports contain no timings, so identical inputs give identical output.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::block::{attention_contraction, block_fwd, block_inv, split, CouplingVariant, InverseOptions, StreamPair};
use crate::checkpoint::{load_checkpoint, save_checkpoint, write_atomic, Checkpoint};
use crate::config::{Overrides, RunConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{compare_strategies, model_fd_check};
use crate::model::{memory_report, ModelConfig, ModelParams, TokenBatch};
use crate::tensor::{Precision, Rng, Tensor};
use crate::train::{eval_loss, Fingerprints, LogRecord, Trainer};

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    /// Compute failure, including an aborted reconstruction.
    pub const RUNTIME: u8 = 1;
    /// Invalid arguments or configuration.
    pub const CONFIG: u8 = 2;
    /// A check ran to completion and exceeded its tolerance.
    pub const TOLERANCE: u8 = 3;
    /// Missing or corrupt checkpoint.
    pub const CHECKPOINT: u8 = 4;
}

#[derive(Debug, Parser)]
#[command(name = "revffn", version, about = "Reversible MoE transformer training and diagnostics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every command.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// single | double
    #[arg(long)]
    pub precision: Option<Precision>,
    /// paper | strict
    #[arg(long)]
    pub coupling: Option<CouplingVariant>,
    #[arg(long)]
    pub inv_iters: Option<usize>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Common {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        cfg.apply(&Overrides {
            seed: self.seed,
            precision: self.precision,
            coupling: self.coupling,
            inv_iters: self.inv_iters,
            out: self.out.clone(),
        });
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the configured training schedule.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compare reversible gradients with the caching backward and finite differences.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Std of random down-projections; 0 keeps the identity init.
        #[arg(long, default_value_t = 0.0)]
        adapter_std: f64,
        #[arg(long, default_value_t = 8)]
        fd_samples: usize,
        /// Strategy tolerance; defaults to 1e-8 (strict) or 1e-6 (paper).
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long, default_value_t = 1e-5)]
        fd_tolerance: f64,
    },
    /// Sweep inverse iteration counts for both coupling variants.
    InvertCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.1)]
        adapter_std: f64,
        /// Random inputs per layer.
        #[arg(long, default_value_t = 4)]
        samples: usize,
    },
    /// Activation ledger over model depths.
    MemReport {
        #[command(flatten)]
        common: Common,
    },
    /// Held-out loss and perplexity of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// Output of one command.
#[derive(Debug, Clone)]
pub struct Report {
    pub name: &'static str,
    pub text: String,
    pub json: Value,
    /// A tolerance check failed.
    pub breach: bool,
}

impl Report {
    pub fn exit_code(&self) -> u8 {
        if self.breach {
            exit::TOLERANCE
        } else {
            exit::OK
        }
    }

    /// Write `<name>.txt` / `<name>.json` into the output directory.
    pub fn write(&self, cfg: &RunConfig) -> Result<()> {
        if !(cfg.reports.text || cfg.reports.json) {
            return Ok(());
        }
        fs::create_dir_all(&cfg.output_dir)?;
        if cfg.reports.text {
            write_atomic(&cfg.output_dir.join(format!("{}.txt", self.name)), self.text.as_bytes())?;
        }
        if cfg.reports.json {
            let body = serde_json::to_string_pretty(&self.json)?;
            write_atomic(&cfg.output_dir.join(format!("{}.json", self.name)), body.as_bytes())?;
        }
        Ok(())
    }
}

pub fn error_exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Json(_) => exit::CONFIG,
        Error::ChecksumMismatch
        | Error::CheckpointMissing(_)
        | Error::VersionMismatch { .. }
        | Error::MalformedCheckpoint(_)
        | Error::CheckpointShape { .. } => exit::CHECKPOINT,
        _ => exit::RUNTIME,
    }
}

/// Dispatch a parsed command line.
pub fn run(cli: Cli) -> ExitCode {
    let result = match &cli.command {
        Command::Train { common, resume } => common.resolve().and_then(|c| train(&c, resume.as_deref()).map(|r| (c, r))),
        Command::GradCheck {
            common,
            adapter_std,
            fd_samples,
            tolerance,
            fd_tolerance,
        } => common.resolve().and_then(|c| {
            let opts = GradCheckOptions {
                adapter_std: *adapter_std,
                fd_samples: *fd_samples,
                tolerance: *tolerance,
                fd_tolerance: *fd_tolerance,
            };
            grad_check(&c, &opts).map(|r| (c, r))
        }),
        Command::InvertCheck {
            common,
            adapter_std,
            samples,
        } => common.resolve().and_then(|c| invert_check(&c, *adapter_std, *samples).map(|r| (c, r))),
        Command::MemReport { common } => common.resolve().and_then(|c| mem_report(&c).map(|r| (c, r))),
        Command::Eval { common, checkpoint } => common.resolve().and_then(|c| eval(&c, checkpoint).map(|r| (c, r))),
    };
    let outcome = result.and_then(|(cfg, report)| {
        print!("{}", report.text);
        report.write(&cfg)?;
        Ok(report.exit_code())
    });
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(error_exit_code(&e))
        }
    }
}

fn to_json(v: &impl Serialize) -> Value {
    serde_json::to_value(v).expect("report values serialize")
}

fn checkpoint_of(t: &Trainer) -> Checkpoint {
    Checkpoint {
        config: t.cfg.clone(),
        next_step: t.step,
        params: t.params.clone(),
        optimizer: Some(t.adam.clone()),
    }
}

/// Train per the config, writing `train_log.jsonl`, `config.resolved.json`,
/// periodic `ckpt-<step>.bin` files and `final.bin` into the output directory.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<Report> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    write_atomic(&out.join("config.resolved.json"), cfg.to_json_pretty().as_bytes())?;

    let corpus = cfg.corpus.load(cfg.model.vocab_size)?;
    let params = ModelParams::init(&cfg.model)?;
    let schedule = cfg.stages(&params);
    let mut t = Trainer::new(cfg.model.clone(), params, schedule, cfg.loop_options())?;
    if let Some(path) = resume {
        let ck = load_checkpoint(path, &cfg.model)?;
        if ck.next_step > t.total_steps() {
            return Err(Error::MalformedCheckpoint(format!(
                "checkpoint is at step {} but the schedule has {} steps",
                ck.next_step,
                t.total_steps()
            )));
        }
        t.params = ck.params;
        if let Some(st) = ck.optimizer {
            t.adam = st;
        }
        t.step = ck.next_step;
    }
    let start_step = t.step;
    let initial_eval = eval_loss(&t.params, &t.cfg, &corpus, cfg.training.eval_batch_size)?;

    let mut log = BufWriter::new(File::create(out.join("train_log.jsonl"))?);
    let every = cfg.training.checkpoint_every;
    let mut max_recon = 0.0f64;
    let mut max_ledger = 0usize;
    let mut last_loss = None;
    while !t.done() {
        for r in t.step_once(&corpus)? {
            writeln!(log, "{}", r.to_json_line())?;
            if let LogRecord::Step {
                loss,
                max_recon_error,
                ledger_peak,
                ..
            } = r
            {
                max_recon = max_recon.max(max_recon_error);
                max_ledger = max_ledger.max(ledger_peak);
                last_loss = Some(loss);
            }
        }
        if every > 0 && t.step % every == 0 && !t.done() {
            save_checkpoint(&out.join(format!("ckpt-{:06}.bin", t.step)), &checkpoint_of(&t))?;
        }
    }
    log.flush()?;
    save_checkpoint(&out.join("final.bin"), &checkpoint_of(&t))?;
    let final_eval = eval_loss(&t.params, &t.cfg, &corpus, cfg.training.eval_batch_size)?;

    let stages: Vec<Value> = t
        .schedule
        .iter()
        .map(|s| json!({"stage": s.stage, "steps": s.steps, "learning_rate": s.learning_rate,
                        "trainable_tensors": s.trainable_mask.trainable_count()}))
        .collect();
    let fingerprints: Vec<Fingerprints> = t.fingerprints.clone();
    let mut text = String::new();
    writeln!(text, "train: {} steps ({} to {})", t.step - start_step, start_step, t.step).unwrap();
    for s in &t.schedule {
        writeln!(text, "  stage {:<16} steps {:>5}  lr {:e}", s.stage.as_str(), s.steps, s.learning_rate).unwrap();
    }
    writeln!(text, "  eval loss       {initial_eval:.6} -> {final_eval:.6}").unwrap();
    if let Some(l) = last_loss {
        writeln!(text, "  last train loss {l:.6}").unwrap();
    }
    writeln!(text, "  max recon error {max_recon:.3e}").unwrap();
    writeln!(text, "  ledger peak     {max_ledger} scalars").unwrap();
    writeln!(text, "  checkpoint      {}", out.join("final.bin").display()).unwrap();
    Ok(Report {
        name: "train",
        text,
        json: json!({
            "start_step": start_step,
            "end_step": t.step,
            "initial_eval_loss": initial_eval,
            "final_eval_loss": final_eval,
            "max_recon_error": max_recon,
            "ledger_peak": max_ledger,
            "stages": stages,
            "fingerprints": to_json(&fingerprints),
        }),
        breach: false,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub adapter_std: f64,
    pub fd_samples: usize,
    pub tolerance: Option<f64>,
    pub fd_tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            adapter_std: 0.0,
            fd_samples: 8,
            tolerance: None,
            fd_tolerance: 1e-5,
        }
    }
}

/// Strategy tolerance for reversible-vs-caching gradients.
pub fn default_strategy_tolerance(v: CouplingVariant) -> f64 {
    match v {
        CouplingVariant::StrictRevnet => 1e-8,
        CouplingVariant::PaperAsymmetric => 1e-6,
    }
}

pub fn grad_check(cfg: &RunConfig, opts: &GradCheckOptions) -> Result<Report> {
    let m = &cfg.model;
    let mut params = ModelParams::init(m)?;
    if opts.adapter_std > 0.0 {
        params.randomize_adapters(opts.adapter_std, m.seed ^ 0xada)?;
    }
    let seq = cfg.corpus.seq_len().min(8);
    let mut rng = Rng::new(m.seed).fork(0x9c);
    let tokens = TokenBatch::random(2, seq, m.vocab_size, &mut rng)?;
    let targets = TokenBatch::random(2, seq, m.vocab_size, &mut rng)?;

    let cmp = compare_strategies(&tokens, &targets, &params, m)?;
    let fd = model_fd_check(&tokens, &targets, &params, m, opts.fd_samples, m.seed)?;
    let tol = opts.tolerance.unwrap_or_else(|| default_strategy_tolerance(m.coupling));
    let strat_ok = cmp.max_relative_error() <= tol;
    let fd_ok = fd.max_relative_error <= opts.fd_tolerance;

    let mut text = String::new();
    writeln!(
        text,
        "grad-check: coupling {} precision {} inv_iters {} adapter_std {}",
        m.coupling,
        m.precision.as_str(),
        m.inv_iters,
        opts.adapter_std
    )
    .unwrap();
    writeln!(text, "  loss reversible {:.17e}", cmp.loss_reversible).unwrap();
    writeln!(text, "  loss caching    {:.17e}", cmp.loss_caching).unwrap();
    writeln!(
        text,
        "  reversible vs caching  max rel {:.3e}  (tol {:.0e}, worst {})  {}",
        cmp.max_relative_error(),
        tol,
        cmp.grads.worst_tensor.as_deref().unwrap_or("-"),
        if strat_ok { "ok" } else { "BREACH" }
    )
    .unwrap();
    writeln!(
        text,
        "  reversible vs central differences ({} coords)  max rel {:.3e}  (tol {:.0e})  {}",
        fd.samples.len(),
        fd.max_relative_error,
        opts.fd_tolerance,
        if fd_ok { "ok" } else { "BREACH" }
    )
    .unwrap();
    writeln!(text, "  max recon error {:.3e}", cmp.max_recon_error).unwrap();
    Ok(Report {
        name: "grad_check",
        text,
        json: json!({
            "coupling": m.coupling,
            "precision": m.precision,
            "inv_iters": m.inv_iters,
            "adapter_std": opts.adapter_std,
            "strategies": to_json(&cmp),
            "strategy_tolerance": tol,
            "finite_differences": to_json(&fd),
            "fd_tolerance": opts.fd_tolerance,
            "pass": strat_ok && fd_ok,
        }),
        breach: !(strat_ok && fd_ok),
    })
}

/// Reconstruction error of one instance across an iteration sweep.
#[derive(Debug, Clone, Serialize)]
pub struct InversionInstance {
    pub layer: usize,
    pub sample: usize,
    pub scale: f64,
    /// `max|x_rec - x| / max(1, max|x|)` per sweep entry.
    pub errors: Vec<f64>,
    pub non_increasing: bool,
    /// Spectral-norm estimate of the attention branch Jacobian in `X1`.
    pub contraction: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantSweep {
    pub coupling: CouplingVariant,
    pub iters: Vec<usize>,
    pub instances: Vec<InversionInstance>,
}

impl VariantSweep {
    pub fn max_error(&self, k: usize) -> f64 {
        self.instances.iter().map(|i| i.errors[k]).fold(0.0, f64::max)
    }

    pub fn all_non_increasing(&self) -> bool {
        self.instances.iter().all(|i| i.non_increasing)
    }

    /// Sorted errors at sweep position `k`.
    pub fn distribution(&self, k: usize) -> Vec<f64> {
        let mut v: Vec<f64> = self.instances.iter().map(|i| i.errors[k]).collect();
        v.sort_by(f64::total_cmp);
        v
    }
}

/// `e_k <= e_{k-1}`, allowing a few ulps of the scale once the error sits at
/// the rounding floor.
pub fn non_increasing(errors: &[f64], precision: Precision) -> bool {
    let slack = 4.0 * precision.epsilon();
    errors.windows(2).all(|w| w[1] <= w[0] + slack)
}

fn sweep_variant(
    params: &ModelParams,
    inputs: &[(usize, usize, StreamPair)],
    v: CouplingVariant,
    iters: &[usize],
    precision: Precision,
) -> Result<VariantSweep> {
    let mut instances = Vec::with_capacity(inputs.len());
    for (layer, sample, x) in inputs {
        let p = &params.blocks[*layer];
        let y = block_fwd(x, p, v)?;
        let scale = x.max_abs().max(1.0);
        let errors = iters
            .iter()
            .map(|&k| Ok(block_inv(&y, p, v, InverseOptions::new(k))?.x.max_abs_diff(x)? / scale))
            .collect::<Result<Vec<f64>>>()?;
        let contraction = match v {
            CouplingVariant::PaperAsymmetric => Some(attention_contraction(&x.left, &x.right, p, 30)?),
            CouplingVariant::StrictRevnet => None,
        };
        instances.push(InversionInstance {
            layer: *layer,
            sample: *sample,
            scale,
            non_increasing: non_increasing(&errors, precision),
            errors,
            contraction,
        });
    }
    Ok(VariantSweep {
        coupling: v,
        iters: iters.to_vec(),
        instances,
    })
}

/// Maximum strict-variant round-trip error accepted, relative to the input scale.
pub fn strict_inverse_tolerance(p: Precision) -> f64 {
    match p {
        Precision::Double => 1e-10,
        Precision::Single => 1e-4,
    }
}

pub fn invert_check(cfg: &RunConfig, adapter_std: f64, samples: usize) -> Result<Report> {
    let m = ModelConfig {
        n_layers: cfg.model.n_layers.max(1),
        ..cfg.model.clone()
    };
    let mut params = ModelParams::init(&m)?;
    params.randomize_adapters(adapter_std, m.seed ^ 0x1ab)?;
    let mut iters: BTreeSet<usize> = [1, 2, 4, 8].into_iter().collect();
    if let Some(k) = (cfg.model.inv_iters > 0).then_some(cfg.model.inv_iters) {
        iters.insert(k);
    }
    let iters: Vec<usize> = iters.into_iter().collect();
    let seq = cfg.corpus.seq_len().min(8);
    let mut rng = Rng::new(m.seed).fork(0x1c);
    let mut inputs = Vec::new();
    for l in 0..m.n_layers {
        for s in 0..samples.max(1) {
            let h = Tensor::randn(&[2, seq, m.d_model], 1.0, m.precision, &mut rng)?;
            inputs.push((l, s, split(&h)?));
        }
    }
    let sweeps = [CouplingVariant::StrictRevnet, CouplingVariant::PaperAsymmetric]
        .into_iter()
        .map(|v| sweep_variant(&params, &inputs, v, &iters, m.precision))
        .collect::<Result<Vec<_>>>()?;

    let strict_tol = strict_inverse_tolerance(m.precision);
    let strict_max = (0..iters.len()).map(|k| sweeps[0].max_error(k)).fold(0.0, f64::max);
    let strict_ok = strict_max <= strict_tol;
    let eps = m.precision.epsilon();

    let mut text = String::new();
    writeln!(
        text,
        "invert-check: {} instances ({} layers x {} samples), precision {}, adapter_std {}",
        inputs.len(),
        m.n_layers,
        samples.max(1),
        m.precision.as_str(),
        adapter_std
    )
    .unwrap();
    for sw in &sweeps {
        writeln!(text, "  {} coupling", sw.coupling).unwrap();
        writeln!(text, "    {:>6}  {:>12}  {:>12}  {:>10}", "iters", "max err", "median err", "< eps").unwrap();
        for (k, &n) in sw.iters.iter().enumerate() {
            let d = sw.distribution(k);
            let below = d.iter().filter(|&&e| e < eps).count();
            writeln!(
                text,
                "    {:>6}  {:>12.3e}  {:>12.3e}  {:>5}/{:<4}",
                n,
                d[d.len() - 1],
                d[d.len() / 2],
                below,
                d.len()
            )
            .unwrap();
        }
        writeln!(text, "    non-increasing on every instance: {}", sw.all_non_increasing()).unwrap();
    }
    let paper = &sweeps[1];
    let k1 = paper.iters.iter().position(|&n| n == 1).expect("sweep includes 1");
    let d1 = paper.distribution(k1);
    let mean1 = d1.iter().sum::<f64>() / d1.len() as f64;
    writeln!(
        text,
        "  paper n_iters=1 error: min {:.3e} median {:.3e} mean {:.3e} max {:.3e} (machine eps {:.3e})",
        d1[0],
        d1[d1.len() / 2],
        mean1,
        d1[d1.len() - 1],
        eps
    )
    .unwrap();
    let contractions: Vec<f64> = paper.instances.iter().filter_map(|i| i.contraction).collect();
    let cmax = contractions.iter().copied().fold(0.0, f64::max);
    writeln!(text, "  attention contraction estimate: max {cmax:.3e}").unwrap();
    writeln!(
        text,
        "  strict round trip max {strict_max:.3e} (tol {strict_tol:.0e})  {}",
        if strict_ok { "ok" } else { "BREACH" }
    )
    .unwrap();

    Ok(Report {
        name: "invert_check",
        text,
        json: json!({
            "precision": m.precision,
            "adapter_std": adapter_std,
            "iters": iters,
            "sweeps": to_json(&sweeps),
            "paper_iters1_distribution": d1,
            "strict_max_error": strict_max,
            "strict_tolerance": strict_tol,
            "pass": strict_ok,
        }),
        breach: !strict_ok,
    })
}

/// Depths swept by `mem-report`, plus the configured one.
pub const MEM_DEPTHS: [usize; 5] = [1, 2, 4, 8, 16];

pub fn mem_report(cfg: &RunConfig) -> Result<Report> {
    let mut depths: BTreeSet<usize> = MEM_DEPTHS.into_iter().collect();
    if cfg.model.n_layers > 0 {
        depths.insert(cfg.model.n_layers);
    }
    let (b, s) = (cfg.training.batch_size, cfg.corpus.seq_len());
    let mut rows = Vec::new();
    let mut text = String::new();
    writeln!(text, "mem-report: B={b} S={s} d={} (inter-block cached activations, scalars)", cfg.model.d_model).unwrap();
    writeln!(
        text,
        "  {:>3}  {:>12} {:>12}  {:>12} {:>12}  {:>10}  {:>10}  check",
        "L", "rev analytic", "rev measured", "cache analyt", "cache meas", "ratio", "1/L"
    )
    .unwrap();
    let mut all_ok = true;
    for l in depths {
        let m = ModelConfig {
            n_layers: l,
            ..cfg.model.clone()
        };
        let r = memory_report(&m, b, s)?;
        let expected = 1.0 / l as f64;
        let ok = r.ratio == Some(expected)
            && r.reversible.analytic_inter_block == r.reversible.measured_inter_block
            && r.caching.analytic_inter_block == r.caching.measured_inter_block
            && r.reversible.scalars_cached_per_layer.iter().all(|&c| c == 0)
            && r.caching.measured_inter_block == b * s * m.d_model * l;
        all_ok &= ok;
        writeln!(
            text,
            "  {:>3}  {:>12} {:>12}  {:>12} {:>12}  {:>10.6}  {:>10.6}  {}",
            l,
            r.reversible.analytic_inter_block,
            r.reversible.measured_inter_block,
            r.caching.analytic_inter_block,
            r.caching.measured_inter_block,
            r.ratio.unwrap_or(f64::NAN),
            expected,
            if ok { "ok" } else { "MISMATCH" }
        )
        .unwrap();
        rows.push(r);
    }
    writeln!(text, "  reversible per-layer cache is 0 at every depth; the boundary pair is the only inter-block state").unwrap();
    Ok(Report {
        name: "mem_report",
        text,
        json: json!({"batch": b, "seq": s, "rows": to_json(&rows), "pass": all_ok}),
        breach: !all_ok,
    })
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path) -> Result<Report> {
    let ck = load_checkpoint(checkpoint, &cfg.model)?;
    let corpus = cfg.corpus.load(cfg.model.vocab_size)?;
    let loss = eval_loss(&ck.params, &cfg.model, &corpus, cfg.training.eval_batch_size)?;
    let tokens: usize = corpus.eval.len() * corpus.seq_len;
    let ppl = loss.exp();
    let mut text = String::new();
    writeln!(text, "eval: {} (step {})", checkpoint.display(), ck.next_step).unwrap();
    writeln!(text, "  held-out tokens {tokens}").unwrap();
    writeln!(text, "  loss            {loss:.6}").unwrap();
    writeln!(text, "  perplexity      {ppl:.4}").unwrap();
    Ok(Report {
        name: "eval",
        text,
        json: json!({"checkpoint": checkpoint, "step": ck.next_step, "tokens": tokens, "loss": loss, "perplexity": ppl}),
        breach: false,
    })
}
