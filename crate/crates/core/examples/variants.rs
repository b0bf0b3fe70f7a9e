//! The four model variants side by side: parameter counts, and how the
//! held-out loss of an untrained model reacts to the iteration count.
//!
//! ```text
//! cargo run --release --example variants
//! ```

use abbie::model::{count_params, forward, init_params, ForwardOptions, ModelConfig, ModelContext, Variant};
use abbie::tensor::Graph;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tokens: Vec<u32> = "the quick brown fox jumps over the lazy dog"
        .bytes()
        .map(u32::from)
        .collect();
    println!("{:<8} {:>10} {:>10} {:>8}", "variant", "params", "body", "train_r");
    for v in Variant::ALL {
        let c = ModelConfig::desk(v);
        let n = count_params(&c);
        println!(
            "{:<8} {:>10} {:>10} {:>8}",
            v.name(),
            n.total(),
            n.body,
            c.train_iters()
        );
    }

    // An untrained Std model and the same weights run as AbbIE-C agree
    // exactly at r = 1.
    let std = ModelConfig::desk(Variant::Std);
    let abbie_c = std.clone().with_variant(Variant::AbbieC);
    let params = init_params(&std)?;
    let logits = |c: &ModelConfig| -> Result<Vec<f32>, Box<dyn std::error::Error>> {
        let ctx = ModelContext::new(c)?;
        let g = Graph::inference();
        let p = params.bind(&g, false);
        let out = forward(&ctx, &p, &tokens, 1, ForwardOptions::eval(1))?;
        Ok(out.logits.value().data().to_vec())
    };
    let (a, b) = (logits(&std)?, logits(&abbie_c)?);
    let same = a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
    println!("\nstd and abbie-c logits at r=1 bitwise equal: {same}");

    // Std refuses r > 1 unless explicitly looped.
    let ctx = ModelContext::new(&std)?;
    let g = Graph::inference();
    let p = params.bind(&g, false);
    match forward(&ctx, &p, &tokens, 1, ForwardOptions::eval(2)) {
        Ok(_) => println!("std at r=2: accepted"),
        Err(e) => println!("std at r=2: {e}"),
    }
    Ok(())
}
