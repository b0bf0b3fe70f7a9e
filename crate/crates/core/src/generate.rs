//! Autoregressive sampling.
//!
//! Head and Tail blocks keep KV caches across emitted tokens. The Body is
//! iterated, so a cached key at iteration `k` would go stale once the
//! state it came from changes; it is recomputed over the whole Head-output
//! history for every emitted token instead. Causality makes the recomputed
//! states of earlier positions identical to the previous pass, so the Tail
//! caches stay valid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::layers::KvCache;
use crate::model::{body_iterate, head_forward, tail_forward, DepthInit, ForwardOptions, ModelContext, ModelParams};
use crate::tensor::{Graph, Tensor};
use crate::trainer::TrainError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    pub iters: usize,
    pub max_new: usize,
    /// 0 means greedy decoding.
    pub temperature: f64,
    pub seed: u64,
    /// Seed of the Depth initial state.
    pub depth_seed: u64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            iters: 2,
            max_new: 64,
            temperature: 0.0,
            seed: 0,
            depth_seed: crate::model::DEFAULT_EVAL_DEPTH_SEED,
        }
    }
}

/// Highest entry; ties go to the lowest index.
fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_row(row: &[f32], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    if temperature <= 0.0 {
        return argmax(row);
    }
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let weights: Vec<f64> = row.iter().map(|&v| ((v as f64 - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Continues `prompt` by up to `opts.max_new` tokens, returning only the new ones.
pub fn generate(
    ctx: &ModelContext<f32>,
    params: &ModelParams<f32>,
    prompt: &[u32],
    opts: &SampleOptions,
) -> Result<Vec<u32>, TrainError> {
    if opts.max_new == 0 {
        return Ok(Vec::new());
    }
    if prompt.is_empty() {
        return Err(TrainError::Config("sampling needs a non-empty prompt".into()));
    }
    let total = prompt.len() + opts.max_new;
    if total > ctx.config.max_seq_len {
        return Err(TrainError::Config(format!(
            "prompt of {} tokens plus {} new exceeds max_seq_len {}",
            prompt.len(),
            opts.max_new,
            ctx.config.max_seq_len
        )));
    }
    let d = ctx.config.d_model;
    let mut head_caches = vec![KvCache::default(); params.head.len()];
    let mut tail_caches = vec![KvCache::default(); params.tail.len()];
    let mut history: Vec<f32> = Vec::with_capacity(total * d);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::with_capacity(opts.max_new);
    let mut fresh: Vec<u32> = prompt.to_vec();
    while out.len() < opts.max_new {
        let g = Graph::inference();
        let p = params.bind(&g, false);
        let h0_new = head_forward(ctx, &p, &fresh, 1, Some(&mut head_caches))?;
        history.extend_from_slice(h0_new.value().data());
        let t = history.len() / d;
        let h0 = g.constant(Tensor::new(vec![1, t, d], history.clone())?);
        let mut fo = ForwardOptions {
            iters: opts.iters,
            capture_trace: false,
            depth_init: DepthInit::Seed(opts.depth_seed),
            loop_std: false,
        };
        let (h, _) = body_iterate(ctx, &p, h0, &mut fo)?;
        let h_new = h.narrow(1, t - fresh.len(), fresh.len())?;
        let logits = tail_forward(ctx, &p, h_new, Some(&mut tail_caches))?;
        let lv = logits.value();
        let v = lv.last_dim();
        let last = &lv.data()[lv.len() - v..];
        let next = sample_row(last, opts.temperature, &mut rng) as u32;
        out.push(next);
        fresh = vec![next];
    }
    Ok(out)
}
