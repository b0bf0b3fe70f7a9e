use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::layers::AttnGeometry;

/// How the Body is iterated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// One pass through every block.
    Std,
    /// `h_{k+1} = B(h_k)`.
    AbbieC,
    /// `h_{k+1} = B(h_k) + h_k`.
    AbbieD,
    /// `s_{k+1} = B(P · [s_k ; h_0])` from a random `s_0`.
    Depth,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Std, Variant::AbbieC, Variant::AbbieD, Variant::Depth];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Std => "std",
            Variant::AbbieC => "abbie-c",
            Variant::AbbieD => "abbie-d",
            Variant::Depth => "depth",
        }
    }

    pub fn is_iterative(self) -> bool {
        self != Variant::Std
    }

    /// Iterations used for training unless configured otherwise.
    pub fn default_train_iters(self) -> usize {
        if self.is_iterative() {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                ModelError::Config(format!(
                    "unknown variant {s:?} (expected std, abbie-c, abbie-d or depth)"
                ))
            })
    }
}

/// Architecture of a Head/Body/Tail decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Blocks in the Head (after the embedding).
    pub n_head_blocks: usize,
    /// Blocks in the iterated Body.
    pub n_body_blocks: usize,
    /// Blocks in the Tail (before the final norm and unembedding).
    pub n_tail_blocks: usize,
    pub d_model: usize,
    pub ffn_size: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub rope_theta: f64,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Body iterations during training; `None` picks the variant default.
    pub train_iters: Option<usize>,
    pub init_std: f64,
    /// Seed of the parameter-init stream.
    pub seed: u64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(Variant::AbbieD)
    }
}

impl ModelConfig {
    /// Byte-level model sized for a single CPU: d=128, 1/4/1 blocks, about 1.9M params.
    pub fn desk(variant: Variant) -> Self {
        Self {
            variant,
            n_head_blocks: 1,
            n_body_blocks: 4,
            n_tail_blocks: 1,
            d_model: 128,
            ffn_size: 1024,
            n_heads: 4,
            n_kv_heads: 2,
            rope_theta: 10_000.0,
            vocab_size: 256,
            max_seq_len: 256,
            train_iters: None,
            init_std: 0.02,
            seed: 0,
            norm_eps: 1e-5,
        }
    }

    /// The 200M row of the reference configurations (2/10/2 blocks).
    pub fn reference_200m(variant: Variant) -> Self {
        Self {
            n_head_blocks: 2,
            n_body_blocks: 10,
            n_tail_blocks: 2,
            d_model: 1024,
            ffn_size: 4096,
            n_heads: 16,
            n_kv_heads: 8,
            rope_theta: 10_000.0,
            vocab_size: 49_152,
            max_seq_len: 2048,
            ..Self::desk(variant)
        }
    }

    /// The 350M row of the reference configurations (2/20/2 blocks).
    pub fn reference_350m(variant: Variant) -> Self {
        Self {
            n_body_blocks: 20,
            ..Self::reference_200m(variant)
        }
    }

    /// Tiny model for tests and gradient checks: d=16, 2 blocks.
    pub fn tiny(variant: Variant) -> Self {
        Self {
            variant,
            n_head_blocks: 0,
            n_body_blocks: 1,
            n_tail_blocks: 1,
            d_model: 16,
            ffn_size: 32,
            n_heads: 4,
            n_kv_heads: 2,
            rope_theta: 10_000.0,
            vocab_size: 11,
            max_seq_len: 8,
            train_iters: None,
            init_std: 0.3,
            seed: 7,
            norm_eps: 1e-5,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self.train_iters = None;
        self
    }

    /// Training iteration count after defaults.
    pub fn train_iters(&self) -> usize {
        self.train_iters.unwrap_or_else(|| self.variant.default_train_iters())
    }

    pub fn geometry(&self) -> Result<AttnGeometry, ModelError> {
        AttnGeometry::new(self.d_model, self.n_heads, self.n_kv_heads).map_err(|e| ModelError::Config(e.to_string()))
    }

    pub fn d_kv(&self) -> usize {
        self.d_model / self.n_heads.max(1) * self.n_kv_heads
    }

    /// Checks every structural invariant, naming the first one violated.
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.n_head_blocks + self.n_body_blocks + self.n_tail_blocks == 0 {
            return fail("n_head_blocks + n_body_blocks + n_tail_blocks must be >= 1".into());
        }
        if self.variant.is_iterative() && self.n_body_blocks == 0 {
            return fail(format!("variant {} needs n_body_blocks >= 1", self.variant));
        }
        if self.d_model == 0 || self.ffn_size == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return fail("d_model, ffn_size, vocab_size and max_seq_len must be positive".into());
        }
        let geo = self.geometry()?;
        if geo.d_head % 2 != 0 {
            return fail(format!(
                "head dimension d_model/n_heads = {} must be even for rotary embeddings",
                geo.d_head
            ));
        }
        if self.rope_theta.is_nan() || self.rope_theta <= 1.0 {
            return fail(format!("rope_theta must be > 1, got {}", self.rope_theta));
        }
        if !self.init_std.is_finite() || self.init_std <= 0.0 {
            return fail(format!("init_std must be positive, got {}", self.init_std));
        }
        if self.norm_eps.is_nan() || self.norm_eps < 0.0 {
            return fail(format!("norm_eps must be >= 0, got {}", self.norm_eps));
        }
        match (self.variant, self.train_iters()) {
            (_, 0) => fail("train_iters must be >= 1".into()),
            (Variant::Std, r) if r != 1 => fail(format!("variant std requires train_iters = 1, got {r}")),
            _ => Ok(()),
        }
    }
}
