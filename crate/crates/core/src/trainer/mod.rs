//! Training loop, perplexity evaluation and checkpoints.

mod checkpoint;
mod eval;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig, TrainConfig};
use crate::data::{load_corpus, train_val_split, BatchStream, ByteTokenizer, DataError, StreamPosition};
use crate::model::{
    forward, init_params, DepthInit, ForwardOptions, ModelConfig, ModelContext, ModelError, ModelParams,
};
use crate::optim::{clip_global_norm, AdamW, OptimError, WsdSchedule};
use crate::tensor::{Graph, TensorError};

pub use checkpoint::{AdamMoments, Checkpoint, CheckpointError, TrainState, FORMAT_VERSION, MAGIC};
pub use eval::{eval_logits, eval_perplexity, log_prob, next_token_logprobs, EvalSettings, PerplexityReport};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: u64 },
    #[error("io error at {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(m) => TrainError::Config(m),
            ModelError::Tensor(t) => TrainError::Tensor(t),
        }
    }
}

impl From<ConfigError> for TrainError {
    fn from(e: ConfigError) -> Self {
        TrainError::Config(e.to_string())
    }
}

type Result<T, E = TrainError> = std::result::Result<T, E>;

/// What one optimizer step did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub tokens: u64,
    pub loss: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Owns parameters, optimizer, batch stream and the Depth noise stream.
pub struct Trainer {
    ctx: ModelContext<f32>,
    params: ModelParams<f32>,
    train: TrainConfig,
    opt: AdamW,
    schedule: WsdSchedule,
    stream: BatchStream,
    depth_rng: ChaCha8Rng,
    step: u64,
    tokens: u64,
}

impl Trainer {
    /// Fresh run: parameters from `model.seed`, batches from `train.data_seed`.
    pub fn new(model: &ModelConfig, train: &TrainConfig, train_tokens: Vec<u32>) -> Result<Self> {
        train.validate(model)?;
        let params = init_params(model)?;
        let stream = BatchStream::new(train_tokens, train.batch_size, train.seq_len, train.data_seed)?;
        Ok(Self {
            ctx: ModelContext::new(model)?,
            params,
            train: train.clone(),
            opt: AdamW::new(train.adamw()),
            schedule: train.schedule(model),
            stream,
            depth_rng: ChaCha8Rng::seed_from_u64(train.depth_seed),
            step: 0,
            tokens: 0,
        })
    }

    /// Continues the run saved in `ckpt` exactly where it stopped.
    pub fn resume(ckpt: &Checkpoint, train_tokens: Vec<u32>) -> Result<Self> {
        let train = ckpt
            .train
            .clone()
            .ok_or_else(|| TrainError::Config("checkpoint has no training state".into()))?;
        let s = &ckpt.state;
        let pos = StreamPosition {
            epoch: s.data_epoch,
            cursor: s.data_cursor as usize,
        };
        let stream = BatchStream::resume(train_tokens, train.batch_size, train.seq_len, s.data_seed, pos)?;
        let mut depth_rng = ChaCha8Rng::seed_from_u64(s.depth_seed);
        let word_pos: u128 = s
            .depth_word_pos
            .parse()
            .map_err(|_| TrainError::Config(format!("bad depth_word_pos {:?}", s.depth_word_pos)))?;
        depth_rng.set_word_pos(word_pos);
        let opt = match &ckpt.adam {
            Some(a) => AdamW::from_state(train.adamw(), s.step, a.m.clone(), a.v.clone()),
            None if s.step == 0 => AdamW::new(train.adamw()),
            None => return Err(TrainError::Config("checkpoint lacks optimizer state".into())),
        };
        Ok(Self {
            ctx: ModelContext::new(&ckpt.model)?,
            params: ckpt.params.clone(),
            schedule: train.schedule(&ckpt.model),
            train,
            opt,
            stream,
            depth_rng,
            step: s.step,
            tokens: s.tokens,
        })
    }

    pub fn model(&self) -> &ModelConfig {
        &self.ctx.config
    }

    pub fn context(&self) -> &ModelContext<f32> {
        &self.ctx
    }

    pub fn params(&self) -> &ModelParams<f32> {
        &self.params
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.train
    }

    pub fn schedule(&self) -> &WsdSchedule {
        &self.schedule
    }

    /// Completed optimizer steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn tokens_seen(&self) -> u64 {
        self.tokens
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.schedule.total_steps
    }

    /// One update: forward at the training iteration count, backward, clip,
    /// AdamW at `lr_at(step + 1)`. On a non-finite loss or gradient nothing
    /// is modified.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let next = self.step + 1;
        let lr = self.schedule.lr_at(next)?;
        let mut stream = self.stream.clone();
        let mut depth_rng = self.depth_rng.clone();
        let batch = stream.next_batch();
        let g = Graph::new();
        let p = self.params.bind(&g, true);
        let opts = ForwardOptions {
            iters: self.ctx.config.train_iters(),
            capture_trace: false,
            depth_init: DepthInit::Stream(&mut depth_rng),
            loop_std: false,
        };
        let out = forward(&self.ctx, &p, &batch.inputs, batch.batch, opts).map_err(|e| self.non_finite(e.into()))?;
        let loss = g
            .cross_entropy(out.logits, &batch.targets, None)
            .map_err(|e| self.non_finite(e.into()))?;
        let loss_value = loss.value().item()? as f64;
        if !loss_value.is_finite() {
            return Err(TrainError::NonFinite {
                what: "loss",
                step: next,
            });
        }
        let mut grads = g.backward(loss)?;
        let mut grads: Vec<_> = p.vars().into_iter().map(|v| grads.take(v)).collect();
        drop(g);
        let grad_norm = clip_global_norm(&mut grads, self.train.grad_clip);
        if !grad_norm.is_finite() {
            return Err(TrainError::NonFinite {
                what: "gradient",
                step: next,
            });
        }
        self.opt.step(self.params.tensors_mut(), &grads, lr)?;
        self.stream = stream;
        self.depth_rng = depth_rng;
        self.step = next;
        self.tokens += self.train.tokens_per_step();
        Ok(StepMetrics {
            step: self.step,
            tokens: self.tokens,
            loss: loss_value,
            lr,
            grad_norm,
        })
    }

    fn non_finite(&self, e: TrainError) -> TrainError {
        match e {
            TrainError::Tensor(TensorError::NonFinite { .. }) => TrainError::NonFinite {
                what: "activation",
                step: self.step + 1,
            },
            e => e,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let (m, v) = self.opt.moments();
        let pos = self.stream.position();
        Checkpoint {
            model: self.ctx.config.clone(),
            train: Some(self.train.clone()),
            state: TrainState {
                step: self.step,
                tokens: self.tokens,
                data_epoch: pos.epoch,
                data_cursor: pos.cursor as u64,
                data_seed: self.train.data_seed,
                depth_seed: self.train.depth_seed,
                depth_word_pos: self.depth_rng.get_word_pos().to_string(),
            },
            params: self.params.clone(),
            adam: (!m.is_empty()).then(|| AdamMoments {
                m: m.to_vec(),
                v: v.to_vec(),
            }),
        }
    }
}

/// Corpus bytes as tokens, split into train and held-out parts.
pub fn load_split(run: &RunConfig) -> Result<(Vec<u32>, Vec<u32>)> {
    let bytes = load_corpus(&run.data.corpus)?;
    let tokens = ByteTokenizer.encode(&bytes);
    let (train, val) = train_val_split(&tokens, run.data.val_fraction)?;
    Ok((train.to_vec(), val.to_vec()))
}

pub const CHECKPOINT_FILE: &str = "checkpoint.abbi";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.abbi";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";

/// Where a training loop writes, and when it stops.
#[derive(Debug, Clone)]
pub struct LoopOptions {
    pub out_dir: PathBuf,
    /// Stop after this many total steps (before the schedule ends).
    pub stop_at: Option<u64>,
    /// Evaluation settings for periodic and final validation.
    pub eval: EvalSettings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub tokens: u64,
    pub last_loss: f64,
    pub final_eval: Option<PerplexityReport>,
    pub checkpoint: PathBuf,
    pub seconds: f64,
}

fn append_line(path: &Path, header: &str, line: &str) -> Result<()> {
    let io = |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    };
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    if fresh {
        writeln!(f, "{header}").map_err(io)?;
    }
    writeln!(f, "{line}").map_err(io)
}

/// Runs `trainer` to the end of its schedule (or `stop_at`), appending to
/// `metrics.csv` and `eval.csv` and writing `checkpoint.abbi` in `out_dir`.
///
/// A non-finite loss writes `diagnostic.abbi` with the last good state and
/// returns the error.
pub fn run_training(trainer: &mut Trainer, val: &[u32], opts: &LoopOptions) -> Result<TrainSummary> {
    let out = &opts.out_dir;
    fs::create_dir_all(out).map_err(|source| TrainError::Io {
        path: out.clone(),
        source,
    })?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let metrics = out.join(METRICS_FILE);
    let eval_csv = out.join(EVAL_FILE);
    let start = Instant::now();
    let end = opts.stop_at.unwrap_or(u64::MAX).min(trainer.schedule().total_steps);
    let cfg = trainer.train_config().clone();
    let seq_len = cfg.seq_len;
    let mut eval_settings = opts.eval;
    eval_settings.iters = trainer.model().train_iters();
    if cfg.eval_windows > 0 {
        eval_settings.max_windows = cfg.eval_windows;
    }
    let mut last_loss = f64::NAN;
    let mut final_eval = None;
    let evaluate = |trainer: &Trainer, settings: &EvalSettings| -> Result<Option<PerplexityReport>> {
        if val.len() < 2 {
            return Ok(None);
        }
        let rep = eval_perplexity(trainer.context(), trainer.params(), val, seq_len, settings)?;
        append_line(
            &eval_csv,
            "step,tokens,r,val_loss,val_ppl",
            &format!(
                "{},{},{},{},{}",
                trainer.step_count(),
                trainer.tokens_seen(),
                rep.iters,
                rep.nll,
                rep.ppl
            ),
        )?;
        log::info!(
            "eval step {} r={} val_loss={:.4} ppl={:.3}",
            trainer.step_count(),
            rep.iters,
            rep.nll,
            rep.ppl
        );
        Ok(Some(rep))
    };
    while trainer.step_count() < end {
        let m = match trainer.step() {
            Ok(m) => m,
            Err(e @ TrainError::NonFinite { .. }) => {
                trainer.checkpoint().save(&out.join(DIAGNOSTIC_FILE))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        last_loss = m.loss;
        append_line(
            &metrics,
            "step,tokens,loss,lr,wallclock",
            &format!(
                "{},{},{},{},{:.3}",
                m.step,
                m.tokens,
                m.loss,
                m.lr,
                start.elapsed().as_secs_f64()
            ),
        )?;
        if cfg.log_every > 0 && m.step % cfg.log_every == 0 {
            log::info!(
                "step {} tokens {} loss {:.4} lr {:.3e} grad_norm {:.3}",
                m.step,
                m.tokens,
                m.loss,
                m.lr,
                m.grad_norm
            );
        }
        if cfg.eval_every > 0 && m.step % cfg.eval_every == 0 && m.step < end {
            evaluate(trainer, &eval_settings)?;
        }
        if cfg.checkpoint_every > 0 && m.step % cfg.checkpoint_every == 0 {
            trainer.checkpoint().save(&ckpt_path)?;
        }
    }
    if trainer.step_count() > 0 {
        final_eval = evaluate(trainer, &eval_settings)?;
    }
    trainer.checkpoint().save(&ckpt_path)?;
    Ok(TrainSummary {
        steps: trainer.step_count(),
        tokens: trainer.tokens_seen(),
        last_loss,
        final_eval,
        checkpoint: ckpt_path,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Loads the corpus and trains from scratch (or from `resume`) per `run`.
pub fn train(run: &RunConfig, out_dir: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    run.validate()?;
    let (train_tokens, val) = load_split(run)?;
    let mut trainer = match resume {
        Some(path) => Trainer::resume(&Checkpoint::load(path)?, train_tokens)?,
        None => Trainer::new(&run.model, &run.train, train_tokens)?,
    };
    let eval = EvalSettings {
        depth_seed: run.eval.depth_seed,
        batch_size: run.eval.batch_size,
        ..EvalSettings::new(run.model.train_iters())
    };
    run_training(
        &mut trainer,
        &val,
        &LoopOptions {
            out_dir: out_dir.to_path_buf(),
            stop_at: None,
            eval,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn tiny_run(variant: Variant) -> (ModelConfig, TrainConfig, Vec<u32>) {
        let model = ModelConfig::tiny(variant);
        let train = TrainConfig {
            token_budget: Some(20 * 2 * 8),
            batch_size: 2,
            seq_len: 8,
            peak_lr: 1e-2,
            ..Default::default()
        };
        let tokens = (0..400).map(|i| ((i * 7 + i / 5) % 11) as u32).collect();
        (model, train, tokens)
    }

    #[test]
    fn first_loss_near_uniform() {
        let (mut model, train, tokens) = tiny_run(Variant::AbbieD);
        model.init_std = 0.02;
        let mut t = Trainer::new(&model, &train, tokens).unwrap();
        let m = t.step().unwrap();
        let ln_v = (model.vocab_size as f64).ln();
        assert!((m.loss - ln_v).abs() < 0.02 * ln_v, "{} vs {ln_v}", m.loss);
    }

    #[test]
    fn loss_decreases_on_tiny_corpus() {
        let (model, train, tokens) = tiny_run(Variant::AbbieD);
        let mut t = Trainer::new(&model, &train, tokens).unwrap();
        let first = t.step().unwrap().loss;
        let mut last = first;
        while !t.is_done() {
            last = t.step().unwrap().loss;
        }
        assert!(last < first, "{last} !< {first}");
        assert_eq!(t.step_count(), 20);
    }

    #[test]
    fn resume_is_bitwise() {
        for v in [Variant::Depth, Variant::AbbieC] {
            let (model, train, tokens) = tiny_run(v);
            let mut a = Trainer::new(&model, &train, tokens.clone()).unwrap();
            for _ in 0..7 {
                a.step().unwrap();
            }
            let bytes = a.checkpoint().to_bytes();
            let mut b = Trainer::resume(&Checkpoint::from_bytes(&bytes).unwrap(), tokens).unwrap();
            while !a.is_done() {
                let (ma, mb) = (a.step().unwrap(), b.step().unwrap());
                assert_eq!(ma, mb);
            }
            assert_eq!(a.params(), b.params(), "{v}");
        }
    }

    #[test]
    fn loop_writes_artifacts() {
        let (model, mut train, tokens) = tiny_run(Variant::AbbieC);
        train.eval_every = 5;
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(&model, &train, tokens[..300].to_vec()).unwrap();
        let opts = LoopOptions {
            out_dir: dir.path().to_path_buf(),
            stop_at: None,
            eval: EvalSettings::new(2),
        };
        let s = run_training(&mut t, &tokens[300..], &opts).unwrap();
        assert_eq!(s.steps, 20);
        let csv = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert!(csv.starts_with("step,tokens,loss,lr,wallclock\n"));
        assert_eq!(csv.lines().count(), 21);
        let evals = fs::read_to_string(dir.path().join(EVAL_FILE)).unwrap();
        assert_eq!(evals.lines().count(), 1 + 4);
        let ck = Checkpoint::load(&s.checkpoint).unwrap();
        assert_eq!(ck.state.step, 20);
        assert_eq!(&ck.params, t.params());
    }
}
