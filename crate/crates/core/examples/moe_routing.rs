//! Top-k routing: which experts each token selects and with what weight.
//!
//! `cargo run --example moe_routing`

use revffn::moe::{moe_fwd, route, ExpertBank, RouterParams};
use revffn::{Precision, Rng, Tensor};

fn main() -> revffn::Result<()> {
    let mut rng = Rng::new(5);
    let router = RouterParams::randn(4, 8, 2, true, Precision::Double, &mut rng)?;
    let experts = ExpertBank::randn(4, 8, 16, Precision::Double, &mut rng)?;
    let x = Tensor::randn(&[5, 8], 1.0, Precision::Double, &mut rng)?;

    let r = route(&x, &router)?;
    for t in 0..r.tokens() {
        let w = r.weights_for(t);
        println!("token {t}: experts {:?} weights [{:.4}, {:.4}] (sum {:.17})", r.experts_for(t), w[0], w[1], w[0] + w[1]);
    }
    let y = moe_fwd(&x, &router, &experts, None)?;
    println!("output shape {:?}, max |y| {:.4}", y.shape(), y.max_abs());

    // Equal logits: the lower index wins.
    let tied = RouterParams {
        gate_weight: Tensor::zeros(&[2, 8], Precision::Double)?,
        top_k: 1,
        frozen: true,
    };
    let r = route(&Tensor::randn(&[1, 8], 1.0, Precision::Double, &mut rng)?, &tied)?;
    println!("tie -> expert {:?} weight {:?}", r.experts_for(0), r.weights_for(0));
    Ok(())
}
