use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{BoundParams, ModelConfig, ModelError, Result, Variant};
use crate::layers::{block_forward, AttnGeometry, BlockVars, KvCache, RopeTable};
use crate::tensor::{Scalar, Tensor, Var};

/// Seed of the Depth initial state when none is given.
pub const DEFAULT_EVAL_DEPTH_SEED: u64 = 0x5eed_0de9;

/// Config-derived tables shared by every forward pass.
#[derive(Debug, Clone)]
pub struct ModelContext<T: Scalar = f32> {
    pub config: ModelConfig,
    pub geometry: AttnGeometry,
    pub rope: RopeTable<T>,
    pub eps: T,
}

impl<T: Scalar> ModelContext<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let geometry = config.geometry()?;
        Ok(Self {
            config: config.clone(),
            geometry,
            rope: RopeTable::new(config.rope_theta, geometry.d_head, config.max_seq_len)?,
            eps: T::lit(config.norm_eps),
        })
    }
}

/// Source of the Depth variant's initial state `s_0 ~ N(0, init_std²)`.
///
/// Values are drawn in row-major `[b, t, d]` order, so a shorter sequence
/// with the same seed sees a prefix of the same draws.
#[derive(Debug)]
pub enum DepthInit<'a> {
    /// Draw from a caller-owned stream (training).
    Stream(&'a mut ChaCha8Rng),
    /// Draw from a fresh stream with this seed (evaluation).
    Seed(u64),
}

#[derive(Debug)]
pub struct ForwardOptions<'a> {
    /// Body iterations `r`.
    pub iters: usize,
    /// Record every Body state and the distances between them.
    pub capture_trace: bool,
    pub depth_init: DepthInit<'a>,
    /// Allow `r > 1` for the Std variant by looping it like AbbIE-C.
    pub loop_std: bool,
}

impl ForwardOptions<'_> {
    pub fn eval(iters: usize) -> Self {
        Self {
            iters,
            capture_trace: false,
            depth_init: DepthInit::Seed(DEFAULT_EVAL_DEPTH_SEED),
            loop_std: false,
        }
    }

    pub fn with_trace(mut self) -> Self {
        self.capture_trace = true;
        self
    }
}

/// Body states `h_0..h_r` and the distances between consecutive states.
///
/// `abs[k]` is the token-averaged `‖h_{k+1} − h_k‖₂`; `rel[k]` averages the
/// per-token ratio `‖h_{k+1} − h_k‖₂ / ‖h_k‖₂`.
#[derive(Debug, Clone)]
pub struct IterationTrace<T: Scalar = f32> {
    pub states: Vec<Tensor<T>>,
    pub abs: Vec<f64>,
    pub rel: Vec<f64>,
}

impl<T: Scalar> IterationTrace<T> {
    fn new() -> Self {
        Self {
            states: Vec::new(),
            abs: Vec::new(),
            rel: Vec::new(),
        }
    }

    fn push(&mut self, state: Tensor<T>) {
        if let Some(prev) = self.states.last() {
            let (a, r) = token_distances(prev, &state);
            self.abs.push(a);
            self.rel.push(r);
        }
        self.states.push(state);
    }
}

/// Mean absolute and relative per-token L2 distance from `prev` to `next`.
fn token_distances<T: Scalar>(prev: &Tensor<T>, next: &Tensor<T>) -> (f64, f64) {
    let d = prev.last_dim();
    let rows = prev.len() / d;
    let (mut abs, mut rel) = (0.0, 0.0);
    for (p, n) in prev.data().chunks(d).zip(next.data().chunks(d)) {
        let (mut diff, mut norm) = (0.0, 0.0);
        for (&a, &b) in p.iter().zip(n) {
            let (a, b) = (a.as_f64(), b.as_f64());
            diff += (b - a) * (b - a);
            norm += a * a;
        }
        let (diff, norm) = (diff.sqrt(), norm.sqrt());
        abs += diff;
        rel += if norm > 0.0 {
            diff / norm
        } else if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
    }
    (abs / rows as f64, rel / rows as f64)
}

fn run_blocks<'g, T: Scalar>(
    ctx: &ModelContext<T>,
    blocks: &[BlockVars<'g, T>],
    mut h: Var<'g, T>,
    mut caches: Option<&mut [KvCache<T>]>,
) -> Result<Var<'g, T>> {
    if let Some(c) = &caches {
        if c.len() != blocks.len() {
            return Err(ModelError::Config(format!(
                "{} caches for {} blocks",
                c.len(),
                blocks.len()
            )));
        }
    }
    for (i, b) in blocks.iter().enumerate() {
        let cache = caches.as_deref_mut().map(|c| &mut c[i]);
        h = block_forward(h, b, ctx.geometry, &ctx.rope, ctx.eps, cache)?.out;
    }
    Ok(h)
}

/// Embedding lookup followed by the Head blocks: `h_0[b, t, d]`.
pub fn head_forward<'g, T: Scalar>(
    ctx: &ModelContext<T>,
    p: &BoundParams<'g, T>,
    tokens: &[u32],
    batch: usize,
    caches: Option<&mut [KvCache<T>]>,
) -> Result<Var<'g, T>> {
    if batch == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(batch) {
        return Err(ModelError::Config(format!(
            "{} tokens do not split into {batch} sequences",
            tokens.len()
        )));
    }
    let t = tokens.len() / batch;
    let offset = caches.as_ref().and_then(|c| c.first()).map_or(0, |c| c.len());
    if offset + t > ctx.config.max_seq_len {
        return Err(ModelError::Config(format!(
            "sequence length {} exceeds max_seq_len {}",
            offset + t,
            ctx.config.max_seq_len
        )));
    }
    let h = p.embedding.graph().embedding(p.embedding, tokens, &[batch, t])?;
    run_blocks(ctx, &p.head, h, caches)
}

/// One Body iteration from state `h`; `h0` is the Head output.
pub fn body_step<'g, T: Scalar>(
    ctx: &ModelContext<T>,
    p: &BoundParams<'g, T>,
    h: Var<'g, T>,
    h0: Var<'g, T>,
) -> Result<Var<'g, T>> {
    match ctx.config.variant {
        Variant::Std | Variant::AbbieC => run_blocks(ctx, &p.body, h, None),
        Variant::AbbieD => Ok(run_blocks(ctx, &p.body, h, None)?.add(h)?),
        Variant::Depth => {
            let proj = p
                .depth_proj
                .ok_or_else(|| ModelError::Config("depth variant without depth_proj".into()))?;
            let x = h.concat_lastdim(h0)?.matmul(proj)?;
            run_blocks(ctx, &p.body, x, None)
        }
    }
}

fn depth_noise<T: Scalar>(shape: &[usize], std: f64, init: &mut DepthInit<'_>) -> Result<Tensor<T>> {
    let normal = Normal::new(0.0, std).map_err(|e| ModelError::Config(e.to_string()))?;
    let n = shape.iter().product();
    let draw = |rng: &mut ChaCha8Rng| (0..n).map(|_| T::lit(normal.sample(rng))).collect::<Vec<_>>();
    let data = match init {
        DepthInit::Stream(rng) => draw(rng),
        DepthInit::Seed(seed) => draw(&mut ChaCha8Rng::seed_from_u64(*seed)),
    };
    Ok(Tensor::new(shape.to_vec(), data)?)
}

/// Runs the Body `opts.iters` times from `h0`, returning `h_r`.
pub fn body_iterate<'g, T: Scalar>(
    ctx: &ModelContext<T>,
    p: &BoundParams<'g, T>,
    h0: Var<'g, T>,
    opts: &mut ForwardOptions<'_>,
) -> Result<(Var<'g, T>, Option<IterationTrace<T>>)> {
    let variant = ctx.config.variant;
    if opts.iters == 0 {
        return Err(ModelError::Config("iteration count must be >= 1".into()));
    }
    if variant == Variant::Std && opts.iters != 1 && !opts.loop_std {
        return Err(ModelError::Config(format!(
            "variant std runs with r = 1 (got r = {}); enable looping to override",
            opts.iters
        )));
    }
    let mut h = if variant == Variant::Depth {
        let noise = depth_noise(&h0.shape(), ctx.config.init_std, &mut opts.depth_init)?;
        h0.graph().constant(noise)
    } else {
        h0
    };
    let mut trace = opts.capture_trace.then(IterationTrace::new);
    if let Some(tr) = &mut trace {
        tr.push((*h.value()).clone());
    }
    for _ in 0..opts.iters {
        h = body_step(ctx, p, h, h0)?;
        if let Some(tr) = &mut trace {
            tr.push((*h.value()).clone());
        }
    }
    Ok((h, trace))
}

/// Tail blocks, final norm and tied unembedding: logits `[b, t, vocab]`.
pub fn tail_forward<'g, T: Scalar>(
    ctx: &ModelContext<T>,
    p: &BoundParams<'g, T>,
    h: Var<'g, T>,
    caches: Option<&mut [KvCache<T>]>,
) -> Result<Var<'g, T>> {
    let h = run_blocks(ctx, &p.tail, h, caches)?;
    let h = h.rms_norm(p.final_norm, ctx.eps)?;
    Ok(h.matmul(p.embedding.transpose_last2()?)?)
}

pub struct ForwardOutput<'g, T: Scalar = f32> {
    pub logits: Var<'g, T>,
    pub trace: Option<IterationTrace<T>>,
}

/// Full forward pass over `tokens` laid out as `[batch, t]`.
pub fn forward<'g, T: Scalar>(
    ctx: &ModelContext<T>,
    p: &BoundParams<'g, T>,
    tokens: &[u32],
    batch: usize,
    mut opts: ForwardOptions<'_>,
) -> Result<ForwardOutput<'g, T>> {
    let h0 = head_forward(ctx, p, tokens, batch, None)?;
    let (h, trace) = body_iterate(ctx, p, h0, &mut opts)?;
    let logits = tail_forward(ctx, p, h, None)?;
    Ok(ForwardOutput { logits, trace })
}
