//! How fast the fixed-point inverse of the paper coupling converges, and
//! the contraction estimate that governs it.
//!
//! `cargo run --release --example fixed_point_inversion`

use revffn::block::{attention_contraction, block_fwd, block_inv, split, BlockDims, BlockParams, CouplingVariant, InverseOptions};
use revffn::{Precision, Rng, Tensor};

fn main() -> revffn::Result<()> {
    let dims = BlockDims {
        d_model: 16,
        n_heads: 2,
        n_experts: 4,
        top_k: 2,
        d_ff: 32,
        causal: true,
        norm_eps: 1e-6,
    };
    let v = CouplingVariant::PaperAsymmetric;
    println!("{:>6}  {:>10}  {:>10}  {:>10}  {:>10}  {:>10}", "std", "rho", "k=1", "k=2", "k=4", "k=8");
    for std in [0.02, 0.05, 0.1, 0.2, 0.4] {
        let mut rng = Rng::new(11);
        let mut block = BlockParams::init(&dims, Precision::Double, &mut rng)?;
        block.randomize_down_projections(std, &mut rng)?;
        let x = split(&Tensor::randn(&[2, 8, 16], 1.0, Precision::Double, &mut rng)?)?;
        let y = block_fwd(&x, &block, v)?;
        let rho = attention_contraction(&x.left, &x.right, &block, 30)?;
        let errs: Vec<String> = [1, 2, 4, 8]
            .iter()
            .map(|&k| Ok(format!("{:.2e}", block_inv(&y, &block, v, InverseOptions::new(k))?.x.max_abs_diff(&x)?)))
            .collect::<revffn::Result<_>>()?;
        println!("{std:>6}  {rho:>10.3}  {:>10}  {:>10}  {:>10}  {:>10}", errs[0], errs[1], errs[2], errs[3]);
    }
    println!("rho < 1 means the iteration contracts; errors shrink roughly like rho^k");
    Ok(())
}
