//! Trains a desk-sized byte-level model on the bundled corpus.
//!
//! ```text
//! cargo run --release --example desk_train -- abbie-d 400000 runs/desk-d
//! ```
//!
//! Arguments: variant (default abbie-d), token budget (default 4e5), output
//! directory (default runs/desk-<variant>).

use std::path::PathBuf;

use abbie::config::RunConfig;
use abbie::model::Variant;
use abbie::trainer::train;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let variant: Variant = args.first().map_or("abbie-d", String::as_str).parse()?;
    let budget: f64 = args.get(1).map_or(Ok(4e5), |s| s.parse())?;
    let out = args
        .get(2)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(format!("runs/desk-{variant}")));

    let corpus = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/corpus");
    let overrides = vec![
        format!("model.variant={variant}"),
        format!("train.token_budget={budget}"),
        "train.peak_lr=2e-3".to_string(),
        "train.log_every=10".to_string(),
        format!(
            "data.corpus=[{:?}, {:?}]",
            corpus.join("alice29.txt"),
            corpus.join("asyoulik.txt")
        ),
    ];
    let run = RunConfig::load(None, &overrides)?;
    println!("{}", run.to_toml());
    let summary = train(&run, &out, None)?;
    println!(
        "steps={} tokens={} last_loss={:.4} seconds={:.1}",
        summary.steps, summary.tokens, summary.last_loss, summary.seconds
    );
    if let Some(e) = summary.final_eval {
        println!("val r={} loss={:.4} ppl={:.3}", e.iters, e.nll, e.ppl);
    }
    Ok(())
}
