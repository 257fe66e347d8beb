//! Acceptance suite. Prints one `[PASS]` or `[FAIL]` line per criterion and
//! exits nonzero if any criterion fails.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use revffn::block::{block_fwd, block_inv, BlockDims, BlockParams, CouplingVariant, InverseOptions, StreamPair};
use revffn::commands::{invert_check, mem_report, train, MEM_DEPTHS};
use revffn::config::{CorpusConfig, ReportFormats, RunConfig, Schedule};
use revffn::gradcheck::compare_strategies;
use revffn::model::{
    memory_report, model_bwd_caching, model_bwd_reversible, model_fwd, ModelConfig, ModelParams, TokenBatch,
};
use revffn::params::named_tensors;
use revffn::train::{run_two_stage, Trainer};
use revffn::{Error, Precision, Result, Rng, Tensor};
use serde_json::Value;

const D: Precision = Precision::Double;

struct Outcome {
    pass: bool,
    detail: String,
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

fn run(id: usize, title: &str, f: impl FnOnce() -> Result<Outcome>) -> bool {
    let start = Instant::now();
    let (pass, detail) = match f() {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("[{tag}] {id}. {title}: {detail} ({:.1}s)", start.elapsed().as_secs_f64());
    pass
}

fn strict_invertibility() -> Result<Outcome> {
    let start = Instant::now();
    let mut rng = Rng::new(0xacce55);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = [8, 16, 32][rng.below(3)];
        let heads = [1, 2, 4][rng.below(3)];
        let n_experts = 2 + rng.below(3);
        let dims = BlockDims {
            d_model: d,
            n_heads: heads,
            n_experts,
            top_k: 1 + rng.below(n_experts),
            d_ff: [8, 16, 32][rng.below(3)],
            causal: rng.below(2) == 0,
            norm_eps: 1e-6,
        };
        let mut p = BlockParams::init(&dims, D, &mut rng)?;
        let std = 0.05 + rng.next_f64() * 0.95;
        p.randomize_down_projections(std, &mut rng)?;
        let (b, s) = (1 + rng.below(4), 1 + rng.below(16));
        let input_std = 0.5 + 2.0 * rng.next_f64();
        let x = StreamPair {
            left: Tensor::randn(&[b, s, d / 2], input_std, D, &mut rng)?,
            right: Tensor::randn(&[b, s, d / 2], input_std, D, &mut rng)?,
        };
        let y = block_fwd(&x, &p, CouplingVariant::StrictRevnet)?;
        let back = block_inv(&y, &p, CouplingVariant::StrictRevnet, InverseOptions::new(1))?;
        let scale = x.left.max_abs().max(x.right.max_abs()).max(1.0);
        let err = back.x.left.max_abs_diff(&x.left)?.max(back.x.right.max_abs_diff(&x.right)?);
        worst = worst.max(err / scale);
    }
    let el = start.elapsed();
    Ok(Outcome {
        pass: worst <= 1e-10 && within(el, 60),
        detail: format!("100 configs, max error / scale {worst:.3e} (tol 1e-10)"),
    })
}

fn paper_reconstruction() -> Result<Outcome> {
    let start = Instant::now();
    let mut all_ok = true;
    let mut n1: Vec<f64> = Vec::new();
    let mut k8: Vec<f64> = Vec::new();
    let mut instances = 0;
    for (d, heads, seed) in [(16, 2, 0), (32, 4, 1), (32, 2, 2)] {
        let mut cfg = RunConfig::default();
        cfg.model.d_model = d;
        cfg.model.n_heads = heads;
        cfg.model.seed = seed;
        cfg.model.inv_iters = 8;
        let r = invert_check(&cfg, 0.1, 4)?;
        let sweeps = r.json["sweeps"].as_array().expect("sweeps");
        let paper = sweeps
            .iter()
            .find(|s| s["coupling"] == "paper")
            .expect("paper sweep");
        let iters: Vec<u64> = paper["iters"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
        let i1 = iters.iter().position(|&k| k == 1).unwrap();
        let i8 = iters.iter().position(|&k| k == 8).unwrap();
        for inst in paper["instances"].as_array().unwrap() {
            instances += 1;
            all_ok &= inst["non_increasing"] == Value::Bool(true);
            let e = inst["errors"].as_array().unwrap();
            n1.push(e[i1].as_f64().unwrap());
            k8.push(e[i8].as_f64().unwrap());
        }
    }
    n1.sort_by(f64::total_cmp);
    let eps = D.epsilon();
    let below1 = n1.iter().filter(|&&e| e < eps).count();
    let below8 = k8.iter().filter(|&&e| e < eps).count();
    println!(
        "    paper inv_iters=1 error: min {:.3e} median {:.3e} max {:.3e}; below eps {below1}/{}",
        n1[0],
        n1[n1.len() / 2],
        n1[n1.len() - 1],
        n1.len()
    );
    println!("    paper inv_iters=8 error below eps: {below8}/{}", k8.len());
    let el = start.elapsed();
    Ok(Outcome {
        pass: all_ok && within(el, 120),
        detail: format!("{instances} instances, non-increasing in inv_iters on all: {all_ok}"),
    })
}

fn gradient_oracle() -> Result<Outcome> {
    let start = Instant::now();
    let mut strict = 0.0f64;
    let mut paper = 0.0f64;
    let n = 24;
    for seed in 0..n {
        let c = common::random_tiny_model(seed, CouplingVariant::StrictRevnet, 8, 0.1)?;
        strict = strict.max(compare_strategies(&c.tokens, &c.targets, &c.params, &c.cfg)?.max_relative_error());
        let c = common::random_tiny_model(seed, CouplingVariant::PaperAsymmetric, 8, 0.05)?;
        paper = paper.max(compare_strategies(&c.tokens, &c.targets, &c.params, &c.cfg)?.max_relative_error());
    }
    let el = start.elapsed();
    Ok(Outcome {
        pass: strict <= 1e-8 && paper <= 1e-6 && within(el, 300),
        detail: format!("{n} models each; strict max rel {strict:.3e} (tol 1e-8), paper max rel {paper:.3e} (tol 1e-6)"),
    })
}

fn finite_differences() -> Result<Outcome> {
    let mut worst = (0.0f64, String::new());
    let mut count = 0;
    for seed in 0..3 {
        for c in common::fd_suite(seed)? {
            count += 1;
            if c.rel > worst.0 || worst.1.is_empty() {
                worst = (c.rel.max(worst.0), c.name.clone());
            }
        }
    }
    Ok(Outcome {
        pass: worst.0 <= 1e-6,
        detail: format!("{count} checks, max rel {:.3e} at {} (tol 1e-6)", worst.0, worst.1),
    })
}

fn memory_claim() -> Result<Outcome> {
    let base = RunConfig::default();
    let (b, s, d) = (base.training.batch_size, base.corpus.seq_len(), base.model.d_model);
    let mut ok = true;
    let mut ratios = Vec::new();
    for l in MEM_DEPTHS {
        let m = ModelConfig { n_layers: l, ..base.model.clone() };
        let r = memory_report(&m, b, s)?;
        let rev_cached: usize = r.reversible.scalars_cached_per_layer.iter().sum();
        let cac_cached: usize = r.caching.scalars_cached_per_layer.iter().sum();
        ok &= rev_cached == 0
            && r.reversible.scalars_cached_per_layer.len() == l
            && cac_cached == b * s * d * l
            && r.caching.measured_inter_block == b * s * d * l
            && r.ratio == Some(1.0 / l as f64);
        ratios.push(format!("{}", r.ratio.unwrap_or(f64::NAN)));
    }
    // The command prints the same ratios.
    let report = mem_report(&base)?;
    for l in MEM_DEPTHS {
        let row = report
            .text
            .lines()
            .find(|line| line.split_whitespace().next() == Some(&l.to_string()));
        let want = format!("{:.6}", 1.0 / l as f64);
        ok &= row.is_some_and(|r| r.split_whitespace().filter(|w| *w == want).count() == 2 && r.ends_with("ok"));
    }
    ok &= !report.breach;
    Ok(Outcome {
        pass: ok,
        detail: format!("B={b} S={s} d={d}; ratio by L {:?}: [{}]", MEM_DEPTHS, ratios.join(", ")),
    })
}

fn snapshot(p: &ModelParams) -> Vec<(String, bool, Tensor)> {
    named_tensors(p)
        .into_iter()
        .map(|(n, g, t)| (n, g.is_adapter(), t.clone()))
        .collect()
}

/// Names of tensors that changed between two snapshots, split by adapter / other.
fn changed(a: &[(String, bool, Tensor)], b: &ModelParams) -> (usize, Vec<String>) {
    let mut adapters = 0;
    let mut others = Vec::new();
    for ((name, is_adapter, before), (_, _, after)) in a.iter().zip(named_tensors(b)) {
        if !before.bitwise_eq(after) {
            if *is_adapter {
                adapters += 1;
            } else {
                others.push(name.clone());
            }
        }
    }
    (adapters, others)
}

fn stage_contracts() -> Result<Outcome> {
    let mut cfg = RunConfig::default();
    cfg.training.stage1.steps = 20;
    cfg.training.stage2.steps = 20;
    let corpus = cfg.corpus.load(cfg.model.vocab_size)?;
    let init = ModelParams::init(&cfg.model)?;
    let before = snapshot(&init);

    let mut t = Trainer::new(cfg.model.clone(), init.clone(), cfg.stages(&init), cfg.loop_options())?;
    while t.step < cfg.training.stage1.steps {
        t.step_once(&corpus)?;
    }
    let (s1_adapters, s1_others) = changed(&before, &t.params);
    t.run(&corpus)?;
    let routers_fixed = before
        .iter()
        .zip(named_tensors(&t.params))
        .filter(|((n, _, _), _)| n.contains(".router."))
        .all(|((_, _, a), (_, _, b))| a.bitwise_eq(b));
    let (_, s2_others) = changed(&before, &t.params);

    cfg.training.schedule = Schedule::ProjectionsOnly;
    let mut t = Trainer::new(cfg.model.clone(), init.clone(), cfg.stages(&init), cfg.loop_options())?;
    t.run(&corpus)?;
    let (po_adapters, po_others) = changed(&before, &t.params);

    let pass = s1_others.is_empty() && s1_adapters > 0 && routers_fixed && !s2_others.is_empty() && po_others.is_empty() && po_adapters > 0;
    Ok(Outcome {
        pass,
        detail: format!(
            "stage 1 moved {s1_adapters} adapter / {} other tensors; routers fixed after stage 2: {routers_fixed}; \
             projections_only moved {po_adapters} adapter / {} other tensors over {} steps",
            s1_others.len(),
            po_others.len(),
            t.total_steps()
        ),
    })
}

fn zero_init() -> Result<Outcome> {
    let mut ok = true;
    let mut cases = 0;
    for coupling in [CouplingVariant::PaperAsymmetric, CouplingVariant::StrictRevnet] {
        for (seed, b, s) in [(0u64, 1usize, 1usize), (1, 2, 7), (2, 4, 16)] {
            cases += 1;
            let cfg = ModelConfig {
                coupling,
                seed,
                ..RunConfig::default().model
            };
            let p = ModelParams::init(&cfg)?;
            let mut empty = p.clone();
            empty.blocks.clear();
            let empty_cfg = ModelConfig { n_layers: 0, ..cfg.clone() };
            let mut rng = Rng::new(seed).fork(7);
            let x = TokenBatch::random(b, s, cfg.vocab_size, &mut rng)?;
            let y = TokenBatch::random(b, s, cfg.vocab_size, &mut rng)?;
            let full = model_fwd(&x, &p, &cfg)?;
            let bare = model_fwd(&x, &empty, &empty_cfg)?;
            ok &= full.logits.tensor().bitwise_eq(bare.logits.tensor());
            let rev = model_bwd_reversible(&x, &y, &p, &cfg, None)?;
            let cac = model_bwd_caching(&x, &y, &p, &cfg, None)?;
            ok &= rev.loss.to_bits() == cac.loss.to_bits();
            ok &= named_tensors(&rev.grads)
                .into_iter()
                .zip(named_tensors(&cac.grads))
                .all(|((_, _, a), (_, _, b))| a.bitwise_eq(b));
        }
    }
    Ok(Outcome {
        pass: ok,
        detail: format!("{cases} cases over both couplings, outputs and gradients bitwise equal: {ok}"),
    })
}

fn with_seed(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.seed = seed;
    if let CorpusConfig::Copy { seed: s, .. } = &mut cfg.corpus {
        *s = seed;
    }
    cfg
}

fn two_stage(cfg: &RunConfig) -> Result<(f64, f64)> {
    let corpus = cfg.corpus.load(cfg.model.vocab_size)?;
    let p = ModelParams::init(&cfg.model)?;
    let mut stages = cfg.stages(&p);
    let s2 = stages.pop().expect("two stages");
    let s1 = stages.pop().expect("two stages");
    let r = run_two_stage(&cfg.model, p, s1, s2, &corpus, cfg.loop_options())?;
    Ok((r.initial_eval_loss, r.final_eval_loss))
}

fn trainability() -> Result<Outcome> {
    let start = Instant::now();
    let mut improved = 0;
    let mut parts = Vec::new();
    let base = RunConfig::default();
    let steps = base.training.stage1.steps + base.training.stage2.steps;
    for seed in 0..5u64 {
        let (a, b) = two_stage(&with_seed(seed))?;
        improved += (b < a) as usize;
        parts.push(format!("{a:.3}->{b:.3}"));
    }
    let el = start.elapsed();

    // Informational: the same run with the paper coupling.
    let mut paper = with_seed(0);
    paper.model.coupling = CouplingVariant::PaperAsymmetric;
    match two_stage(&paper) {
        Ok((a, b)) => println!("    info: paper coupling, seed 0: eval loss {a:.3} -> {b:.3}"),
        Err(e @ Error::Reconstruction { .. }) => println!("    info: paper coupling, seed 0: aborted, {e}"),
        Err(e) => return Err(e),
    }
    Ok(Outcome {
        pass: improved >= 4 && within(el, 600) && base.model.vocab_size == 64 && base.model.d_model == 32 && base.model.n_layers == 4 && steps <= 500,
        detail: format!(
            "copy task, vocab {} d {} L {} {} coupling, {steps} steps; held-out loss reduced in {improved}/5 seeds [{}]",
            base.model.vocab_size,
            base.model.d_model,
            base.model.n_layers,
            base.model.coupling,
            parts.join(", ")
        ),
    })
}

fn read(p: &Path) -> Result<String> {
    Ok(std::fs::read_to_string(p)?)
}

fn reproducibility() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let run_to = |name: &str, resume: Option<&Path>| -> Result<String> {
        let cfg = RunConfig {
            output_dir: dir.path().join(name),
            reports: ReportFormats { text: false, json: false },
            ..RunConfig::default()
        };
        train(&cfg, resume)?;
        read(&cfg.output_dir.join("train_log.jsonl"))
    };
    let a = run_to("a", None)?;
    let b = run_to("b", None)?;
    let identical = a == b && !a.is_empty();

    let mut resumes = Vec::new();
    let every = RunConfig::default().training.checkpoint_every;
    for at in [every, 3 * every] {
        let ck = dir.path().join(format!("a/ckpt-{at:06}.bin"));
        let log = run_to(&format!("r{at}"), Some(&ck))?;
        let tail: Vec<&str> = a
            .lines()
            .filter(|l| {
                let v: Value = serde_json::from_str(l).expect("log line");
                v["step"].as_u64().expect("step") as usize >= at
            })
            .collect();
        let same_final = std::fs::read(dir.path().join("a/final.bin"))? == std::fs::read(dir.path().join(format!("r{at}/final.bin")))?;
        resumes.push((at, log.lines().collect::<Vec<_>>() == tail && same_final));
    }
    let resumed_ok = resumes.iter().all(|(_, ok)| *ok);
    Ok(Outcome {
        pass: identical && resumed_ok,
        detail: format!(
            "two runs identical: {identical} ({} log lines); resume matches uninterrupted run: {}",
            a.lines().count(),
            resumes
                .iter()
                .map(|(at, ok)| format!("from step {at} {ok}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    })
}

fn main() -> ExitCode {
    let results = [
        run(1, "exact invertibility, strict coupling", strict_invertibility),
        run(2, "paper-coupling reconstruction sweep", paper_reconstruction),
        run(3, "reversible backward matches caching backward", gradient_oracle),
        run(4, "primitive VJPs match central differences", finite_differences),
        run(5, "activation ledger counts", memory_claim),
        run(6, "two-stage schedule contracts", stage_contracts),
        run(7, "zero-init function preservation", zero_init),
        run(8, "trainability on the copy task", trainability),
        run(9, "reproducibility and resumption", reproducibility),
    ];
    let passed = results.iter().filter(|r| **r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
