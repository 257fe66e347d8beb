//! Reversible backward versus the activation-caching oracle and finite differences.
//!
//! `cargo run --release --example gradient_oracle`

use revffn::block::CouplingVariant;
use revffn::gradcheck::{compare_strategies, model_fd_check};
use revffn::model::{ModelConfig, ModelParams, TokenBatch};
use revffn::Rng;

fn main() -> revffn::Result<()> {
    for coupling in [CouplingVariant::StrictRevnet, CouplingVariant::PaperAsymmetric] {
        let cfg = ModelConfig {
            coupling,
            ..ModelConfig::tiny()
        };
        let mut params = ModelParams::init(&cfg)?;
        params.randomize_adapters(0.05, 1)?;
        let mut rng = Rng::new(2);
        let x = TokenBatch::random(2, 6, cfg.vocab_size, &mut rng)?;
        let y = TokenBatch::random(2, 6, cfg.vocab_size, &mut rng)?;

        let cmp = compare_strategies(&x, &y, &params, &cfg)?;
        let fd = model_fd_check(&x, &y, &params, &cfg, 6, 3)?;
        println!("{coupling} coupling, inv_iters {}", cfg.inv_iters);
        println!("  loss            {:.12} (caching {:.12})", cmp.loss_reversible, cmp.loss_caching);
        println!(
            "  vs caching      max rel {:.3e} (worst {})",
            cmp.max_relative_error(),
            cmp.grads.worst_tensor.as_deref().unwrap_or("-")
        );
        println!("  vs central diff max rel {:.3e}", fd.max_relative_error);
        for s in &fd.samples {
            println!("    {:<40} [{:>4}] {:+.6e} {:+.6e}", s.tensor, s.index, s.analytic, s.numeric);
        }
    }
    Ok(())
}
