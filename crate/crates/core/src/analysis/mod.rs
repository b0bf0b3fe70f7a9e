//! Measurement tools: fixed-point probe, iteration sweep, FLOPs accounting
//! and multiple-choice scoring.

mod flops;
mod mc;
mod probe;
mod sweep;

pub use flops::{flops_estimate, write_flops_csv, FlopsReport};
pub use mc::{
    load_task, mc_eval, pick, write_mc_csv, ChoiceScore, ChoiceScorer, ItemResult, McItem, McReport, McTask,
    ModelScorer, RandomLogits,
};
pub use probe::{fixed_point_probe, write_probe_csv, ProbeRow};
pub use sweep::{dedup_iters, iteration_sweep, write_sweep_csv, SweepRow};
