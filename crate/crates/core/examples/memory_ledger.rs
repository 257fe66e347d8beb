//! Count activations held between forward and backward for both strategies.
//!
//! `cargo run --release --example memory_ledger`

use revffn::model::{memory_report, ModelConfig};

fn main() -> revffn::Result<()> {
    let (b, s) = (2, 8);
    println!("{:>3}  {:>10}  {:>10}  {:>8}  {:>12}", "L", "reversible", "caching", "ratio", "tape peak");
    for l in [1, 2, 4, 8, 16] {
        let cfg = ModelConfig {
            n_layers: l,
            ..ModelConfig::tiny()
        };
        let r = memory_report(&cfg, b, s)?;
        println!(
            "{l:>3}  {:>10}  {:>10}  {:>8.4}  {:>12}",
            r.reversible.measured_inter_block,
            r.caching.measured_inter_block,
            r.ratio.unwrap_or(f64::NAN),
            r.reversible.transient_peak_scalars
        );
    }
    println!("the reversible column holds only the final stream pair (B*S*d); the transient tape lives inside one block");
    Ok(())
}
