//! Shared by the examples: the bundled corpus and a small model trained in
//! memory when no checkpoint is given.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use abbie::config::RunConfig;
use abbie::model::Variant;
use abbie::trainer::{load_split, Checkpoint, Trainer};

pub fn corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/corpus")
}

pub fn task_file() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/tasks/synthetic_mc.jsonl")
}

/// A d=64 model with short windows on the bundled corpus.
pub fn small_run(variant: Variant, token_budget: u64) -> RunConfig {
    let c = corpus_dir();
    let overrides = vec![
        format!("model.variant={variant}"),
        "model.d_model=64".into(),
        "model.ffn_size=256".into(),
        "model.n_body_blocks=2".into(),
        "model.max_seq_len=128".into(),
        "train.seq_len=128".into(),
        format!("train.token_budget={token_budget}"),
        "train.peak_lr=3e-3".into(),
        "eval.max_windows=16".into(),
        format!(
            "data.corpus=[{:?}, {:?}]",
            c.join("alice29.txt"),
            c.join("asyoulik.txt")
        ),
    ];
    RunConfig::load(None, &overrides).expect("example config is valid")
}

/// Loads `path`, or trains `run` for its whole budget.
pub fn checkpoint_or_train(path: Option<&Path>, run: &RunConfig) -> Checkpoint {
    if let Some(p) = path {
        return Checkpoint::load(p).expect("readable checkpoint");
    }
    let (train, _) = load_split(run).expect("bundled corpus");
    let mut t = Trainer::new(&run.model, &run.train, train).expect("trainer");
    eprintln!(
        "training {} for {} steps (pass a checkpoint path to skip)",
        run.model.variant,
        t.schedule().total_steps
    );
    while !t.is_done() {
        let m = t.step().expect("finite step");
        if m.step.is_multiple_of(20) {
            eprintln!("  step {:>4} loss {:.4}", m.step, m.loss);
        }
    }
    t.checkpoint()
}
