//! Multiple-choice scoring on the bundled synthetic task.
//!
//! ```text
//! cargo run --release --example mc_eval -- [checkpoint.abbi]
//! ```
//!
//! Prints the chance-level baseline from random logits, then the accuracy
//! of a model at r = 1, 2 and 4.

mod common;

use std::path::PathBuf;

use abbie::analysis::{load_task, mc_eval, ModelScorer, RandomLogits};
use abbie::model::{ModelContext, Variant};
use abbie::trainer::EvalSettings;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let task = load_task(&common::task_file())?;
    let chance = mc_eval(&mut RandomLogits::new(0, 256), &task)?;
    println!("random logits: {:.3} over {} items", chance.accuracy(), chance.scored());

    let path = std::env::args().nth(1).map(PathBuf::from);
    let run = common::small_run(Variant::AbbieD, 200_000);
    let ckpt = common::checkpoint_or_train(path.as_deref(), &run);
    let ctx = ModelContext::new(&ckpt.model)?;
    for r in [1, 2, 4] {
        let mut scorer = ModelScorer {
            ctx: &ctx,
            params: &ckpt.params,
            settings: EvalSettings::new(r),
        };
        let rep = mc_eval(&mut scorer, &task)?;
        println!("{} r={r}: {:.3}", ckpt.model.variant, rep.accuracy());
    }
    Ok(())
}
