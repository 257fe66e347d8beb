//! Adapter warm-up followed by joint fine-tuning on the copy task, with the
//! parameter-group fingerprints that show which groups each stage touched.
//!
//! `cargo run --release --example two_stage_training`

use revffn::config::RunConfig;
use revffn::model::ModelParams;
use revffn::train::{run_two_stage, StageSpec};

fn main() -> revffn::Result<()> {
    let cfg = RunConfig::default();
    let corpus = cfg.corpus.load(cfg.model.vocab_size)?;
    let params = ModelParams::init(&cfg.model)?;
    let s1 = StageSpec::adapter_warmup(&params, 1e-3, 100);
    let s2 = StageSpec::joint_fine_tune(&params, 3e-4, 100, true);
    let r = run_two_stage(&cfg.model, params, s1, s2, &corpus, cfg.loop_options())?;

    println!("held-out loss {:.4} -> {:.4}", r.initial_eval_loss, r.final_eval_loss);
    let [f0, f1, f2] = r.fingerprints;
    println!("stage 1 kept backbone fixed: {}", f0.backbone == f1.backbone);
    println!("stage 1 moved adapters:      {}", f0.adapters != f1.adapters);
    println!("stage 2 kept routers fixed:  {}", f1.routers == f2.routers);
    println!("stage 2 moved experts:       {}", f1.experts != f2.experts);
    Ok(())
}
