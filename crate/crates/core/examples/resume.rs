//! Stops a run halfway, saves a checkpoint, resumes from it, and checks the
//! resumed weights match an uninterrupted run bit for bit.
//!
//! ```text
//! cargo run --release --example resume
//! ```

mod common;

use abbie::model::Variant;
use abbie::trainer::{load_split, Checkpoint, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let run = common::small_run(Variant::Depth, 40_000);
    let (train, _) = load_split(&run)?;

    let mut straight = Trainer::new(&run.model, &run.train, train.clone())?;
    while !straight.is_done() {
        straight.step()?;
    }

    let mut first = Trainer::new(&run.model, &run.train, train.clone())?;
    let half = first.schedule().total_steps / 2;
    while first.step_count() < half {
        first.step()?;
    }
    let dir = std::env::temp_dir().join("abbie-resume-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("half.abbi");
    first.checkpoint().save(&path)?;
    println!("saved step {} to {}", first.step_count(), path.display());

    let mut resumed = Trainer::resume(&Checkpoint::load(&path)?, train)?;
    while !resumed.is_done() {
        resumed.step()?;
    }
    let a = straight.checkpoint().to_bytes();
    let b = resumed.checkpoint().to_bytes();
    println!("steps {}; resumed run identical: {}", resumed.step_count(), a == b);
    Ok(())
}
