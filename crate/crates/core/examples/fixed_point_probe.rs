//! Distances between consecutive Body states as the Body is iterated.
//!
//! ```text
//! cargo run --release --example fixed_point_probe -- [checkpoint.abbi]
//! ```
//!
//! A Body that settles towards a fixed point shows shrinking distances.

mod common;

use std::path::PathBuf;

use abbie::analysis::fixed_point_probe;
use abbie::data::eval_windows;
use abbie::model::{ModelContext, Variant};
use abbie::trainer::load_split;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args().nth(1).map(PathBuf::from);
    let run = common::small_run(Variant::AbbieD, 200_000);
    let ckpt = common::checkpoint_or_train(path.as_deref(), &run);
    let ctx = ModelContext::new(&ckpt.model)?;
    let (_, val) = load_split(&run)?;
    let seq = ckpt.model.max_seq_len.min(run.train.seq_len);
    let samples: Vec<&[u32]> = eval_windows(&val, seq).into_iter().take(4).map(|w| &w[..seq]).collect();
    let rows = fixed_point_probe(&ctx, &ckpt.params, &samples, 16, 0)?;
    println!("{:>3} {:>12} {:>12}", "k", "mean abs", "mean rel");
    for k in 0..16 {
        let at_k: Vec<_> = rows.iter().filter(|r| r.k == k).collect();
        let n = at_k.len() as f64;
        let abs = at_k.iter().map(|r| r.abs_dist).sum::<f64>() / n;
        let rel = at_k.iter().map(|r| r.rel_dist).sum::<f64>() / n;
        println!("{k:>3} {abs:>12.5} {rel:>12.5}");
    }
    Ok(())
}
