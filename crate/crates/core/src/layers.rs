//! Transformer block primitives: RoPE, causal grouped-query attention, the
//! SiLU feed-forward network and the pre-norm residual block.
//!
//! Projections carry no biases. Weight matrices are stored `[in, out]` and
//! applied as `x · W`.

use std::sync::Arc;

use thiserror::Error;

use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum LayerError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T, E = LayerError> = std::result::Result<T, E>;

/// Per-position cosine/sine caches for rotary embeddings.
///
/// The rotation angle of pair `j` at position `p` is `p · θ^(−2j/d_head)`.
#[derive(Debug, Clone)]
pub struct RopeTable<T: Scalar = f32> {
    theta: f64,
    d_head: usize,
    max_len: usize,
    cos: Arc<[T]>,
    sin: Arc<[T]>,
}

impl<T: Scalar> RopeTable<T> {
    pub fn new(theta: f64, d_head: usize, max_len: usize) -> Result<Self> {
        if d_head == 0 || !d_head.is_multiple_of(2) {
            return Err(LayerError::Config(format!(
                "rotary embeddings need an even head dimension, got {d_head}"
            )));
        }
        let half = d_head / 2;
        let mut cos = Vec::with_capacity(max_len * half);
        let mut sin = Vec::with_capacity(max_len * half);
        for p in 0..max_len {
            for j in 0..half {
                let a = Self::angle_for(theta, d_head, p, j);
                cos.push(T::lit(a.cos()));
                sin.push(T::lit(a.sin()));
            }
        }
        Ok(Self {
            theta,
            d_head,
            max_len,
            cos: cos.into(),
            sin: sin.into(),
        })
    }

    fn angle_for(theta: f64, d_head: usize, pos: usize, pair: usize) -> f64 {
        pos as f64 * theta.powf(-2.0 * pair as f64 / d_head as f64)
    }

    /// Rotation angle of pair `pair` at position `pos`.
    pub fn angle(&self, pos: usize, pair: usize) -> f64 {
        Self::angle_for(self.theta, self.d_head, pos, pair)
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }
}

/// Rotates `x[b, t, h, d_head]`; token `i` sits at position `offset + i`.
pub fn rope_apply<'g, T: Scalar>(x: Var<'g, T>, table: &RopeTable<T>, offset: usize) -> Result<Var<'g, T>> {
    let s = x.shape();
    if s.len() != 4 || s[3] != table.d_head {
        return Err(LayerError::Config(format!(
            "rope expects [b, t, h, {}], got {s:?}",
            table.d_head
        )));
    }
    if offset + s[1] > table.max_len {
        return Err(LayerError::Config(format!(
            "sequence end {} exceeds rope table length {}",
            offset + s[1],
            table.max_len
        )));
    }
    Ok(x.rope(&table.cos, &table.sin, offset)?)
}

/// Head layout of a grouped-query attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnGeometry {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
}

impl AttnGeometry {
    pub fn new(d_model: usize, n_heads: usize, n_kv_heads: usize) -> Result<Self> {
        if n_heads == 0 || n_kv_heads == 0 {
            return Err(LayerError::Config("head counts must be positive".into()));
        }
        if !d_model.is_multiple_of(n_heads) {
            return Err(LayerError::Config(format!(
                "d_model {d_model} not divisible by n_heads {n_heads}"
            )));
        }
        if !n_heads.is_multiple_of(n_kv_heads) {
            return Err(LayerError::Config(format!(
                "n_heads {n_heads} not divisible by n_kv_heads {n_kv_heads}"
            )));
        }
        Ok(Self {
            n_heads,
            n_kv_heads,
            d_head: d_model / n_heads,
        })
    }

    pub fn d_model(&self) -> usize {
        self.n_heads * self.d_head
    }

    /// Width of the key/value projections.
    pub fn d_kv(&self) -> usize {
        self.n_kv_heads * self.d_head
    }

    /// KV head serving query head `q`.
    pub fn kv_head_of(&self, q: usize) -> usize {
        q / (self.n_heads / self.n_kv_heads)
    }
}

/// Weights of one pre-norm Transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T: Scalar = f32> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub w1: Tensor<T>,
    pub w2: Tensor<T>,
    pub attn_norm: Tensor<T>,
    pub ffn_norm: Tensor<T>,
}

/// Field names in storage order.
pub const BLOCK_TENSORS: [&str; 8] = ["wq", "wk", "wv", "wo", "w1", "w2", "attn_norm", "ffn_norm"];

impl<T: Scalar> BlockParams<T> {
    /// Zero projections, unit norm gains.
    pub fn zeros(d_model: usize, d_kv: usize, ffn: usize) -> Self {
        Self {
            wq: Tensor::zeros([d_model, d_model]),
            wk: Tensor::zeros([d_model, d_kv]),
            wv: Tensor::zeros([d_model, d_kv]),
            wo: Tensor::zeros([d_model, d_model]),
            w1: Tensor::zeros([d_model, ffn]),
            w2: Tensor::zeros([ffn, d_model]),
            attn_norm: Tensor::ones([d_model]),
            ffn_norm: Tensor::ones([d_model]),
        }
    }

    pub fn tensors(&self) -> [&Tensor<T>; 8] {
        [
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.w1,
            &self.w2,
            &self.attn_norm,
            &self.ffn_norm,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 8] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w1,
            &mut self.w2,
            &mut self.attn_norm,
            &mut self.ffn_norm,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> BlockParams<U> {
        BlockParams {
            wq: self.wq.cast(),
            wk: self.wk.cast(),
            wv: self.wv.cast(),
            wo: self.wo.cast(),
            w1: self.w1.cast(),
            w2: self.w2.cast(),
            attn_norm: self.attn_norm.cast(),
            ffn_norm: self.ffn_norm.cast(),
        }
    }

    /// Records the block's tensors as graph leaves.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> BlockVars<'g, T> {
        let leaf = |t: &Tensor<T>| {
            if trainable {
                graph.param(t.clone())
            } else {
                graph.constant(t.clone())
            }
        };
        BlockVars {
            wq: leaf(&self.wq),
            wk: leaf(&self.wk),
            wv: leaf(&self.wv),
            wo: leaf(&self.wo),
            w1: leaf(&self.w1),
            w2: leaf(&self.w2),
            attn_norm: leaf(&self.attn_norm),
            ffn_norm: leaf(&self.ffn_norm),
        }
    }
}

/// [`BlockParams`] recorded in a graph.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars<'g, T: Scalar = f32> {
    pub wq: Var<'g, T>,
    pub wk: Var<'g, T>,
    pub wv: Var<'g, T>,
    pub wo: Var<'g, T>,
    pub w1: Var<'g, T>,
    pub w2: Var<'g, T>,
    pub attn_norm: Var<'g, T>,
    pub ffn_norm: Var<'g, T>,
}

impl<'g, T: Scalar> BlockVars<'g, T> {
    pub fn vars(&self) -> [Var<'g, T>; 8] {
        [
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.w1,
            self.w2,
            self.attn_norm,
            self.ffn_norm,
        ]
    }
}

/// Keys and values (post-RoPE) of already-processed positions.
#[derive(Debug, Clone)]
pub struct KvCache<T: Scalar = f32> {
    k: Option<Tensor<T>>,
    v: Option<Tensor<T>>,
}

impl<T: Scalar> Default for KvCache<T> {
    fn default() -> Self {
        Self { k: None, v: None }
    }
}

impl<T: Scalar> KvCache<T> {
    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.k.as_ref().map_or(0, |k| k.shape()[1])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn append(slot: &mut Option<Tensor<T>>, new: &Tensor<T>) -> Result<Tensor<T>> {
        let joined = match slot.take() {
            None => new.clone(),
            Some(old) => {
                let (so, sn) = (old.shape(), new.shape());
                if so[0] != sn[0] || so[2..] != sn[2..] {
                    return Err(TensorError::Shape {
                        op: "kv_cache",
                        lhs: so.to_vec(),
                        rhs: sn.to_vec(),
                    }
                    .into());
                }
                let (b, to, tn) = (so[0], so[1], sn[1]);
                let row: usize = so[2..].iter().product();
                let mut data = Vec::with_capacity(old.len() + new.len());
                for bi in 0..b {
                    data.extend_from_slice(&old.data()[bi * to * row..(bi + 1) * to * row]);
                    data.extend_from_slice(&new.data()[bi * tn * row..(bi + 1) * tn * row]);
                }
                Tensor::new(vec![b, to + tn, so[2], so[3]], data)?
            }
        };
        *slot = Some(joined.clone());
        Ok(joined)
    }
}

/// Causal GQA: `Wo · attn(rope(x·Wq), rope(x·Wk), x·Wv)` over `x[b, t, d]`.
///
/// With a cache, `x` holds only new positions; they are placed after the
/// cached ones and their keys/values are appended.
pub fn causal_gqa_attention<'g, T: Scalar>(
    x: Var<'g, T>,
    p: &BlockVars<'g, T>,
    geo: AttnGeometry,
    rope: &RopeTable<T>,
    cache: Option<&mut KvCache<T>>,
) -> Result<Var<'g, T>> {
    let s = x.shape();
    if s.len() != 3 || s[2] != geo.d_model() {
        return Err(LayerError::Config(format!(
            "attention expects [b, t, {}], got {s:?}",
            geo.d_model()
        )));
    }
    let (b, t) = (s[0], s[1]);
    let offset = cache.as_ref().map_or(0, |c| c.len());
    let q = x.matmul(p.wq)?.reshape([b, t, geo.n_heads, geo.d_head])?;
    let k = x.matmul(p.wk)?.reshape([b, t, geo.n_kv_heads, geo.d_head])?;
    let v = x.matmul(p.wv)?.reshape([b, t, geo.n_kv_heads, geo.d_head])?;
    let q = rope_apply(q, rope, offset)?;
    let mut k = rope_apply(k, rope, offset)?;
    let mut v = v;
    if let Some(cache) = cache {
        let graph = x.graph();
        k = graph.constant(KvCache::append(&mut cache.k, &k.value())?);
        v = graph.constant(KvCache::append(&mut cache.v, &v.value())?);
    }
    let o = x.graph().attention(q, k, v)?.reshape([b, t, geo.d_model()])?;
    Ok(o.matmul(p.wo)?)
}

/// `W2 · silu(W1 · x)`.
pub fn ffn_forward<'g, T: Scalar>(x: Var<'g, T>, p: &BlockVars<'g, T>) -> Result<Var<'g, T>> {
    Ok(x.matmul(p.w1)?.silu()?.matmul(p.w2)?)
}

/// Residual contributions of one block, for inspecting `out − in`.
#[derive(Debug, Clone, Copy)]
pub struct BlockOutput<'g, T: Scalar = f32> {
    pub out: Var<'g, T>,
    pub attn: Var<'g, T>,
    pub ffn: Var<'g, T>,
}

/// `y = x + Attn(norm(x)); out = y + FFN(norm(y))`.
pub fn block_forward<'g, T: Scalar>(
    x: Var<'g, T>,
    p: &BlockVars<'g, T>,
    geo: AttnGeometry,
    rope: &RopeTable<T>,
    eps: T,
    cache: Option<&mut KvCache<T>>,
) -> Result<BlockOutput<'g, T>> {
    let attn = causal_gqa_attention(x.rms_norm(p.attn_norm, eps)?, p, geo, rope, cache)?;
    let y = x.add(attn)?;
    let ffn = ffn_forward(y.rms_norm(p.ffn_norm, eps)?, p)?;
    let out = y.add(ffn)?;
    Ok(BlockOutput { out, attn, ffn })
}
