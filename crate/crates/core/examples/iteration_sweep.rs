//! Held-out perplexity of a recursive model at several iteration counts.
//!
//! ```text
//! cargo run --release --example iteration_sweep -- [checkpoint.abbi]
//! ```
//!
//! Without a checkpoint a small AbbIE-D model is trained first (about a
//! minute).

mod common;

use std::path::PathBuf;

use abbie::analysis::{iteration_sweep, write_sweep_csv};
use abbie::model::{ModelContext, Variant};
use abbie::trainer::{load_split, EvalSettings};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args().nth(1).map(PathBuf::from);
    let run = common::small_run(Variant::AbbieD, 200_000);
    let ckpt = common::checkpoint_or_train(path.as_deref(), &run);
    let ctx = ModelContext::new(&ckpt.model)?;
    let (_, val) = load_split(&run)?;
    let seq = ckpt.model.max_seq_len.min(run.train.seq_len);
    let settings = EvalSettings {
        max_windows: 16,
        ..EvalSettings::new(1)
    };
    let rows = iteration_sweep(&ctx, &ckpt.params, &val, seq, &[1, 2, 4, 8, 16], &settings, false)?;
    println!("trained at r={}", ckpt.model.train_iters());
    write_sweep_csv(std::io::stdout().lock(), &rows)?;
    Ok(())
}
