use super::TrainError;
use crate::data::eval_windows;
use crate::model::{forward, DepthInit, ForwardOptions, ModelContext, ModelParams};
use crate::tensor::{Graph, Tensor};

/// Evaluation-time settings shared by perplexity, sweeps and scoring.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub iters: usize,
    /// Seed of the Depth initial state.
    pub depth_seed: u64,
    pub batch_size: usize,
    /// Cap on windows; 0 means all.
    pub max_windows: usize,
    /// Loop a Std model past r = 1.
    pub loop_std: bool,
}

impl EvalSettings {
    pub fn new(iters: usize) -> Self {
        Self {
            iters,
            depth_seed: crate::model::DEFAULT_EVAL_DEPTH_SEED,
            batch_size: 8,
            max_windows: 0,
            loop_std: false,
        }
    }

    fn options(&self) -> ForwardOptions<'static> {
        ForwardOptions {
            iters: self.iters,
            capture_trace: false,
            depth_init: DepthInit::Seed(self.depth_seed),
            loop_std: self.loop_std,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerplexityReport {
    pub iters: usize,
    /// Mean negative log-likelihood per predicted token, in nats.
    pub nll: f64,
    pub ppl: f64,
    pub tokens: usize,
    pub windows: usize,
}

/// `log softmax(row)[target]`, computed in `f64`.
pub fn log_prob(row: &[f32], target: u32) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
    row[target as usize] as f64 - max - sum.ln()
}

/// Logits `[b, t, vocab]` for `tokens` laid out as `[batch, t]`.
pub fn eval_logits(
    ctx: &ModelContext<f32>,
    params: &ModelParams<f32>,
    tokens: &[u32],
    batch: usize,
    settings: &EvalSettings,
) -> Result<Tensor<f32>, TrainError> {
    let g = Graph::inference();
    let p = params.bind(&g, false);
    let out = forward(ctx, &p, tokens, batch, settings.options())?;
    let logits = (*out.logits.value()).clone();
    Ok(logits)
}

/// `log p(tokens[i + 1] | tokens[..=i])` for every `i`.
pub fn next_token_logprobs(
    ctx: &ModelContext<f32>,
    params: &ModelParams<f32>,
    tokens: &[u32],
    settings: &EvalSettings,
) -> Result<Vec<f64>, TrainError> {
    if tokens.len() < 2 {
        return Ok(Vec::new());
    }
    let input = &tokens[..tokens.len() - 1];
    let logits = eval_logits(ctx, params, input, 1, settings)?;
    let v = logits.last_dim();
    Ok(logits
        .data()
        .chunks(v)
        .zip(&tokens[1..])
        .map(|(row, &t)| log_prob(row, t))
        .collect())
}

/// `exp(mean NLL)` over non-overlapping held-out windows at `settings.iters`.
pub fn eval_perplexity(
    ctx: &ModelContext<f32>,
    params: &ModelParams<f32>,
    tokens: &[u32],
    seq_len: usize,
    settings: &EvalSettings,
) -> Result<PerplexityReport, TrainError> {
    if settings.iters == 0 {
        return Err(TrainError::Config("iteration count must be >= 1".into()));
    }
    let mut windows = eval_windows(tokens, seq_len);
    if settings.max_windows > 0 {
        windows.truncate(settings.max_windows);
    }
    if windows.is_empty() {
        return Err(TrainError::Config(format!(
            "held-out data has {} tokens, too few to evaluate",
            tokens.len()
        )));
    }
    let (mut total, mut count) = (0.0f64, 0usize);
    for group in windows.chunks(settings.batch_size.max(1)) {
        let t = group[0].len() - 1;
        let mut inputs = Vec::with_capacity(group.len() * t);
        let mut targets = Vec::with_capacity(group.len() * t);
        for w in group {
            inputs.extend_from_slice(&w[..t]);
            targets.extend_from_slice(&w[1..]);
        }
        let logits = eval_logits(ctx, params, &inputs, group.len(), settings)?;
        let v = logits.last_dim();
        for (row, &tgt) in logits.data().chunks(v).zip(&targets) {
            total -= log_prob(row, tgt);
            count += 1;
        }
    }
    let nll = total / count as f64;
    Ok(PerplexityReport {
        iters: settings.iters,
        nll,
        ppl: nll.exp(),
        tokens: count,
        windows: windows.len(),
    })
}
