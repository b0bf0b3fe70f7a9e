//! Binary checkpoint format.
//!
//! ```text
//! "ABBI"              magic
//! u32                 format version
//! u64                 config blob length
//! [u8]                UTF-8 TOML: [model], optional [train], [state]
//! u32                 tensor count
//! per tensor:
//!   u32 + [u8]        name length and UTF-8 name
//!   u32 + [u64]       rank and dims
//!   [f32]             data
//! ```
//!
//! Integers and floats are little-endian. Optimizer moments are stored as
//! `adam.m.<name>` and `adam.v.<name>`.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::TrainConfig;
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ABBI";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io error at {}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated checkpoint: {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

/// Counters and stream positions needed to resume training exactly.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub step: u64,
    pub tokens: u64,
    pub data_epoch: u64,
    pub data_cursor: u64,
    pub data_seed: u64,
    pub depth_seed: u64,
    /// Word position of the depth stream, as a decimal string (u128).
    pub depth_word_pos: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: Option<TrainConfig>,
    state: TrainState,
}

/// Adam moment buffers, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub state: TrainState,
    pub params: ModelParams<f32>,
    pub adam: Option<AdamMoments>,
}

impl Checkpoint {
    /// A checkpoint holding only weights.
    pub fn weights(model: ModelConfig, params: ModelParams<f32>) -> Self {
        Self {
            model,
            train: None,
            state: TrainState::default(),
            params,
            adam: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            model: self.model.clone(),
            train: self.train.clone(),
            state: self.state.clone(),
        };
        let blob = toml::to_string(&header).expect("checkpoint header serializes");
        let named = self.params.named_tensors();
        let mut tensors: Vec<(String, &Tensor<f32>)> = named.clone();
        if let Some(adam) = &self.adam {
            for (prefix, bufs) in [("adam.m.", &adam.m), ("adam.v.", &adam.v)] {
                for ((name, _), t) in named.iter().zip(bufs) {
                    tensors.push((format!("{prefix}{name}"), t));
                }
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(blob.as_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let blob_len = r.u64("config length")? as usize;
        let blob = std::str::from_utf8(r.take(blob_len, "config blob")?)
            .map_err(|e| CheckpointError::Format(format!("config blob is not UTF-8: {e}")))?;
        let header: Header = toml::from_str(blob).map_err(|e| CheckpointError::Format(e.to_string()))?;
        let count = r.u32("tensor count")?;
        let mut tensors = HashMap::new();
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| CheckpointError::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("dims")? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(4).ok_or(CheckpointError::Truncated("tensor data"))?,
                "tensor data",
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Format(e.to_string()))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(CheckpointError::Format(format!("duplicate tensor {name}")));
            }
        }
        if !r.buf.is_empty() {
            return Err(CheckpointError::Format(format!("{} trailing bytes", r.buf.len())));
        }
        let names: Vec<String> = ModelParams::<f32>::zeros(&header.model)
            .named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let mut adam_m = Vec::new();
        let mut adam_v = Vec::new();
        for n in &names {
            if let Some(m) = tensors.remove(&format!("adam.m.{n}")) {
                adam_m.push(m);
            }
            if let Some(v) = tensors.remove(&format!("adam.v.{n}")) {
                adam_v.push(v);
            }
        }
        let adam = match (adam_m.len(), adam_v.len()) {
            (0, 0) => None,
            (a, b) if a == names.len() && b == names.len() => Some(AdamMoments { m: adam_m, v: adam_v }),
            _ => return Err(CheckpointError::Format("incomplete optimizer state".into())),
        };
        let params =
            ModelParams::from_named(&header.model, tensors).map_err(|e| CheckpointError::Format(e.to_string()))?;
        Ok(Self {
            model: header.model,
            train: header.train,
            state: header.state,
            params,
            adam,
        })
    }

    /// Writes atomically via a temporary file in the same directory.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io_err = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(&self.to_bytes()).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
        fs::rename(&tmp, path).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() < n {
            return Err(CheckpointError::Truncated(what));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}
