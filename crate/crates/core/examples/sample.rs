//! Greedy and temperature sampling from a trained model.
//!
//! ```text
//! cargo run --release --example sample -- [checkpoint.abbi] ["prompt"]
//! ```

mod common;

use std::path::PathBuf;

use abbie::data::ByteTokenizer;
use abbie::generate::{generate, SampleOptions};
use abbie::model::{ModelContext, Variant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let path = args.first().filter(|a| a.ends_with(".abbi")).map(PathBuf::from);
    let prompt = args
        .last()
        .filter(|a| !a.ends_with(".abbi"))
        .map_or("Alice was", String::as_str);
    let run = common::small_run(Variant::AbbieD, 200_000);
    let ckpt = common::checkpoint_or_train(path.as_deref(), &run);
    let ctx = ModelContext::new(&ckpt.model)?;
    let tok = ByteTokenizer;
    let ids = tok.encode(prompt);
    for (label, temperature) in [("greedy", 0.0), ("t=0.8", 0.8)] {
        for r in [1, ckpt.model.train_iters(), 8] {
            let opts = SampleOptions {
                iters: r,
                max_new: 60,
                temperature,
                seed: 1,
                ..Default::default()
            };
            let out = generate(&ctx, &ckpt.params, &ids, &opts)?;
            println!("[{label} r={r}] {prompt}{}", tok.decode_lossy(&out)?.replace('\n', " "));
        }
    }
    Ok(())
}
