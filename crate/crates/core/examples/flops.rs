//! Effective parameter counts and training compute for the reference
//! presets at several iteration counts.
//!
//! ```text
//! cargo run --release --example flops -- 4e9
//! ```

use abbie::analysis::{flops_estimate, write_flops_csv};
use abbie::model::{count_params, ModelConfig, Variant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tokens: f64 = std::env::args().nth(1).map_or(Ok(4e9), |s| s.parse())?;
    let mut reports = Vec::new();
    for (name, preset) in [
        ("200m", ModelConfig::reference_200m as fn(Variant) -> ModelConfig),
        ("350m", ModelConfig::reference_350m),
    ] {
        for v in [Variant::Std, Variant::AbbieD, Variant::Depth] {
            let counts = count_params(&preset(v));
            println!("{name} {v}: {} parameters", counts.total());
            let rs: &[usize] = if v == Variant::Std { &[1] } else { &[1, 2, 4, 8] };
            for &r in rs {
                let rep = flops_estimate(&counts, v, r, tokens as u64);
                println!(
                    "  r={r} n_eff={:>12} train_flops={:.3e} efficiency={:.3}",
                    rep.n_eff, rep.train_flops as f64, rep.efficiency
                );
                reports.push(rep);
            }
        }
    }
    println!();
    write_flops_csv(std::io::stdout().lock(), &reports)?;
    Ok(())
}
