//! Interrupt a run, save a checkpoint, resume it, and compare against an
//! uninterrupted run.
//!
//! `cargo run --release --example checkpoint_resume`

use revffn::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use revffn::config::RunConfig;
use revffn::model::ModelParams;
use revffn::train::Trainer;

fn trainer(cfg: &RunConfig) -> revffn::Result<Trainer> {
    let params = ModelParams::init(&cfg.model)?;
    let stages = cfg.stages(&params);
    Trainer::new(cfg.model.clone(), params, stages, cfg.loop_options())
}

fn main() -> revffn::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.training.stage1.steps = 20;
    cfg.training.stage2.steps = 20;
    let corpus = cfg.corpus.load(cfg.model.vocab_size)?;

    let mut full = trainer(&cfg)?;
    full.run(&corpus)?;

    let mut first = trainer(&cfg)?;
    while first.step < 30 {
        first.step_once(&corpus)?;
    }
    let path = std::env::temp_dir().join("revffn-example.ckpt");
    save_checkpoint(
        &path,
        &Checkpoint {
            config: cfg.model.clone(),
            next_step: first.step,
            params: first.params.clone(),
            optimizer: Some(first.adam.clone()),
        },
    )?;

    let ck = load_checkpoint(&path, &cfg.model)?;
    let mut resumed = trainer(&cfg)?;
    resumed.params = ck.params;
    resumed.adam = ck.optimizer.expect("saved with optimizer state");
    resumed.step = ck.next_step;
    resumed.run(&corpus)?;

    let tail = &full.losses()[30..];
    let same = tail.iter().zip(resumed.losses()).all(|(a, b)| a.to_bits() == b.to_bits());
    println!("checkpoint {} bytes", std::fs::metadata(&path)?.len());
    println!("resumed losses bitwise equal to uninterrupted run: {same}");
    std::fs::remove_file(&path)?;
    Ok(())
}
