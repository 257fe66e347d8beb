//! Forward a reversible block, then rebuild its input from the output.
//!
//! `cargo run --example reversible_block`

use revffn::block::{block_fwd, block_inv, split, BlockDims, BlockParams, CouplingVariant, InverseOptions};
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
    let mut rng = Rng::new(7);
    let mut block = BlockParams::init(&dims, Precision::Double, &mut rng)?;

    let x = split(&Tensor::randn(&[2, 6, 16], 1.0, Precision::Double, &mut rng)?)?;
    // Zero down-projections: the block is the identity.
    let y = block_fwd(&x, &block, CouplingVariant::PaperAsymmetric)?;
    println!("zero-init block is identity: {}", y.bitwise_eq(&x));

    block.randomize_down_projections(0.1, &mut rng)?;
    for v in [CouplingVariant::StrictRevnet, CouplingVariant::PaperAsymmetric] {
        let y = block_fwd(&x, &block, v)?;
        let inv = block_inv(&y, &block, v, InverseOptions::new(8))?;
        println!(
            "{v:>6}: |Y - X| = {:.3e}, round-trip error = {:.3e}, residual = {:.3e}",
            y.max_abs_diff(&x)?,
            inv.x.max_abs_diff(&x)?,
            inv.recon_error
        );
    }
    Ok(())
}
