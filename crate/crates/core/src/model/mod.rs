//! Head/Body/Tail decoder with an iterated Body.
//!
//! The embedding feeds the Head blocks, whose output `h_0` enters the Body.
//! The Body runs `r` times according to the [`Variant`], then the Tail blocks,
//! a final RMSNorm and the tied unembedding produce logits.

mod config;
mod forward;
mod params;

use thiserror::Error;

use crate::layers::LayerError;
use crate::tensor::TensorError;

pub use config::{ModelConfig, Variant};
pub use forward::{
    body_iterate, body_step, forward, head_forward, tail_forward, DepthInit, ForwardOptions, ForwardOutput,
    IterationTrace, ModelContext, DEFAULT_EVAL_DEPTH_SEED,
};
pub use params::{count_params, init_params, BoundParams, ModelParams, ParamCounts};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl From<LayerError> for ModelError {
    fn from(e: LayerError) -> Self {
        match e {
            LayerError::Config(m) => ModelError::Config(m),
            LayerError::Tensor(t) => ModelError::Tensor(t),
        }
    }
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
