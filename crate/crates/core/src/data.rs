//! Byte-level tokenization, corpus loading and deterministic batching.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("corpus file not found: {}", .0.display())]
    MissingCorpus(PathBuf),
    #[error("failed to read {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("no corpus files given")]
    NoCorpus,
    #[error("corpus too small: {have} tokens, need at least {need} for batch {batch} x (seq_len {seq_len} + 1)")]
    TooSmall {
        have: usize,
        need: usize,
        batch: usize,
        seq_len: usize,
    },
    #[error("token id {0} is outside the byte vocabulary")]
    BadToken(u32),
    #[error("invalid data setting: {0}")]
    Config(String),
}

/// Identity mapping between bytes and ids `0..256`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const VOCAB_SIZE: usize = 256;

    pub fn vocab_size(&self) -> usize {
        Self::VOCAB_SIZE
    }

    pub fn encode(&self, bytes: impl AsRef<[u8]>) -> Vec<u32> {
        bytes.as_ref().iter().map(|&b| b as u32).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>, DataError> {
        ids.iter()
            .map(|&id| u8::try_from(id).map_err(|_| DataError::BadToken(id)))
            .collect()
    }

    /// Decodes to text, replacing invalid UTF-8 sequences.
    pub fn decode_lossy(&self, ids: &[u32]) -> Result<String, DataError> {
        Ok(String::from_utf8_lossy(&self.decode(ids)?).into_owned())
    }
}

/// Reads and concatenates `paths` in order.
pub fn load_corpus<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<u8>, DataError> {
    if paths.is_empty() {
        return Err(DataError::NoCorpus);
    }
    let mut out = Vec::new();
    for p in paths {
        let p = p.as_ref();
        if !p.is_file() {
            return Err(DataError::MissingCorpus(p.to_path_buf()));
        }
        let bytes = fs::read(p).map_err(|source| DataError::Io {
            path: p.to_path_buf(),
            source,
        })?;
        out.extend_from_slice(&bytes);
    }
    Ok(out)
}

/// Splits off the last `val_fraction` of `tokens` as held-out data.
pub fn train_val_split(tokens: &[u32], val_fraction: f64) -> Result<(&[u32], &[u32]), DataError> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(DataError::Config(format!(
            "val_fraction must be in [0, 1), got {val_fraction}"
        )));
    }
    let n_val = (tokens.len() as f64 * val_fraction).floor() as usize;
    Ok(tokens.split_at(tokens.len() - n_val))
}

/// Non-overlapping windows of `seq_len + 1` tokens in corpus order.
///
/// A corpus shorter than one window but with at least two tokens yields a
/// single shorter window.
pub fn eval_windows(tokens: &[u32], seq_len: usize) -> Vec<&[u32]> {
    let w = seq_len + 1;
    if tokens.len() < w {
        return if tokens.len() >= 2 { vec![tokens] } else { Vec::new() };
    }
    tokens.chunks_exact(w).collect()
}

/// One batch: `inputs` and `targets` are `[batch, seq_len]` row-major, with
/// `targets[i] == inputs[i + 1]` inside each window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub batch: usize,
    pub seq_len: usize,
}

/// Position of a [`BatchStream`], enough to resume it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StreamPosition {
    pub epoch: u64,
    /// Index of the next window in the epoch's shuffled order.
    pub cursor: usize,
}

/// Shuffled non-overlapping windows of `seq_len + 1` tokens.
///
/// Each epoch permutes the windows with a stream seeded by `seed + epoch`.
/// Windows left over after the last full batch of an epoch are skipped.
#[derive(Debug, Clone)]
pub struct BatchStream {
    tokens: Vec<u32>,
    batch: usize,
    seq_len: usize,
    seed: u64,
    pos: StreamPosition,
    order: Vec<usize>,
}

impl BatchStream {
    pub fn new(tokens: Vec<u32>, batch: usize, seq_len: usize, seed: u64) -> Result<Self, DataError> {
        Self::resume(tokens, batch, seq_len, seed, StreamPosition::default())
    }

    pub fn resume(
        tokens: Vec<u32>,
        batch: usize,
        seq_len: usize,
        seed: u64,
        pos: StreamPosition,
    ) -> Result<Self, DataError> {
        if batch == 0 || seq_len == 0 {
            return Err(DataError::Config("batch and seq_len must be positive".into()));
        }
        let need = batch * (seq_len + 1);
        if tokens.len() < need {
            return Err(DataError::TooSmall {
                have: tokens.len(),
                need,
                batch,
                seq_len,
            });
        }
        let mut s = Self {
            tokens,
            batch,
            seq_len,
            seed,
            pos,
            order: Vec::new(),
        };
        s.shuffle();
        Ok(s)
    }

    fn shuffle(&mut self) {
        self.order = (0..self.windows_per_epoch()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(self.pos.epoch));
        self.order.shuffle(&mut rng);
    }

    pub fn windows_per_epoch(&self) -> usize {
        self.tokens.len() / (self.seq_len + 1)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.windows_per_epoch() / self.batch
    }

    pub fn position(&self) -> StreamPosition {
        self.pos
    }

    pub fn next_batch(&mut self) -> Batch {
        if self.pos.cursor + self.batch > self.order.len() {
            self.pos = StreamPosition {
                epoch: self.pos.epoch + 1,
                cursor: 0,
            };
            self.shuffle();
        }
        let w = self.seq_len + 1;
        let n = self.batch * self.seq_len;
        let (mut inputs, mut targets) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for &win in &self.order[self.pos.cursor..self.pos.cursor + self.batch] {
            let window = &self.tokens[win * w..(win + 1) * w];
            inputs.extend_from_slice(&window[..self.seq_len]);
            targets.extend_from_slice(&window[1..]);
        }
        self.pos.cursor += self.batch;
        Batch {
            inputs,
            targets,
            batch: self.batch,
            seq_len: self.seq_len,
        }
    }
}
