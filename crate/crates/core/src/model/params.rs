use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError, Result};
use crate::layers::{BlockParams, BlockVars, BLOCK_TENSORS};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Parameter counts per component.
///
/// The final norm is counted in `tail`; the tied embedding is counted once.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub embedding: u64,
    pub head: u64,
    pub body: u64,
    pub tail: u64,
    pub depth_proj: u64,
}

impl ParamCounts {
    pub fn total(&self) -> u64 {
        self.embedding + self.head + self.body + self.tail + self.depth_proj
    }
}

/// Counts parameters from the configuration alone.
pub fn count_params(config: &ModelConfig) -> ParamCounts {
    let d = config.d_model as u64;
    let dkv = config.d_kv() as u64;
    let f = config.ffn_size as u64;
    let block = 2 * d * d + 2 * d * dkv + 2 * d * f + 2 * d;
    ParamCounts {
        embedding: config.vocab_size as u64 * d,
        head: config.n_head_blocks as u64 * block,
        body: config.n_body_blocks as u64 * block,
        tail: config.n_tail_blocks as u64 * block + d,
        depth_proj: if config.variant == super::Variant::Depth {
            2 * d * d
        } else {
            0
        },
    }
}

/// All model weights. Matrices are stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    /// `[vocab, d]`, also used transposed as the unembedding.
    pub embedding: Tensor<T>,
    pub head: Vec<BlockParams<T>>,
    pub body: Vec<BlockParams<T>>,
    pub tail: Vec<BlockParams<T>>,
    pub final_norm: Tensor<T>,
    /// `[2d, d]`, Depth variant only.
    pub depth_proj: Option<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Zero matrices and unit gains in the shapes `config` requires.
    pub fn zeros(config: &ModelConfig) -> Self {
        let (d, dkv, f) = (config.d_model, config.d_kv(), config.ffn_size);
        let blocks = |n| (0..n).map(|_| BlockParams::zeros(d, dkv, f)).collect();
        Self {
            embedding: Tensor::zeros([config.vocab_size, d]),
            head: blocks(config.n_head_blocks),
            body: blocks(config.n_body_blocks),
            tail: blocks(config.n_tail_blocks),
            final_norm: Tensor::ones([d]),
            depth_proj: (config.variant == super::Variant::Depth).then(|| Tensor::zeros([2 * d, d])),
        }
    }

    /// Tensors with stable names, in storage order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (part, blocks) in [("head", &self.head), ("body", &self.body), ("tail", &self.tail)] {
            for (i, b) in blocks.iter().enumerate() {
                for (name, t) in BLOCK_TENSORS.iter().zip(b.tensors()) {
                    out.push((format!("{part}.{i}.{name}"), t));
                }
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        if let Some(p) = &self.depth_proj {
            out.push(("depth_proj".to_string(), p));
        }
        out
    }

    /// Mutable tensors in the same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embedding];
        for blocks in [&mut self.head, &mut self.body, &mut self.tail] {
            for b in blocks.iter_mut() {
                out.extend(b.tensors_mut());
            }
        }
        out.push(&mut self.final_norm);
        if let Some(p) = &mut self.depth_proj {
            out.push(p);
        }
        out
    }

    /// Rebuilds parameters from named tensors, checking names and shapes.
    pub fn from_named(config: &ModelConfig, mut tensors: HashMap<String, Tensor<T>>) -> Result<Self> {
        let mut params = Self::zeros(config);
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let t = tensors
                .remove(name)
                .ok_or_else(|| ModelError::Config(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(ModelError::Config(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if let Some(extra) = tensors.keys().min() {
            return Err(ModelError::Config(format!("unexpected tensor {extra}")));
        }
        Ok(params)
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let blocks = |v: &Vec<BlockParams<T>>| v.iter().map(|b| b.cast()).collect();
        ModelParams {
            embedding: self.embedding.cast(),
            head: blocks(&self.head),
            body: blocks(&self.body),
            tail: blocks(&self.tail),
            final_norm: self.final_norm.cast(),
            depth_proj: self.depth_proj.as_ref().map(|p| p.cast()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Records every tensor as a leaf of `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> BoundParams<'g, T> {
        let leaf = |t: &Tensor<T>| {
            if trainable {
                graph.param(t.clone())
            } else {
                graph.constant(t.clone())
            }
        };
        let blocks = |v: &Vec<BlockParams<T>>| v.iter().map(|b| b.bind(graph, trainable)).collect();
        BoundParams {
            embedding: leaf(&self.embedding),
            head: blocks(&self.head),
            body: blocks(&self.body),
            tail: blocks(&self.tail),
            final_norm: leaf(&self.final_norm),
            depth_proj: self.depth_proj.as_ref().map(leaf),
        }
    }
}

/// [`ModelParams`] recorded in a graph.
#[derive(Debug, Clone)]
pub struct BoundParams<'g, T: Scalar = f32> {
    pub embedding: Var<'g, T>,
    pub head: Vec<BlockVars<'g, T>>,
    pub body: Vec<BlockVars<'g, T>>,
    pub tail: Vec<BlockVars<'g, T>>,
    pub final_norm: Var<'g, T>,
    pub depth_proj: Option<Var<'g, T>>,
}

impl<'g, T: Scalar> BoundParams<'g, T> {
    /// Vars in the same order as [`ModelParams::named_tensors`].
    pub fn vars(&self) -> Vec<Var<'g, T>> {
        let mut out = vec![self.embedding];
        for blocks in [&self.head, &self.body, &self.tail] {
            for b in blocks {
                out.extend(b.vars());
            }
        }
        out.push(self.final_norm);
        out.extend(self.depth_proj);
        out
    }
}

/// Draws weights from `config.seed`: matrices from N(0, init_std²) truncated
/// at ±3σ, norm gains at 1.
pub fn init_params<T: Scalar>(config: &ModelConfig) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut params = ModelParams::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let std = config.init_std;
    let normal = Normal::new(0.0, std).map_err(|e| ModelError::Config(e.to_string()))?;
    for t in params.tensors_mut() {
        if t.rank() < 2 {
            continue;
        }
        for v in t.data_mut() {
            let x = loop {
                let x: f64 = normal.sample(&mut rng);
                if x.abs() <= 3.0 * std {
                    break x;
                }
            };
            *v = T::lit(x);
        }
    }
    Ok(params)
}
