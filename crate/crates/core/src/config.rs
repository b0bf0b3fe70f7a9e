//! Run configuration file: `[model]`, `[train]`, `[data]` and `[eval]`
//! sections, plus dotted `section.key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, ModelError};
use crate::optim::{cot_tokens, AdamWConfig, WsdSchedule};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unknown config key {0}")]
    UnknownKey(String),
    #[error("invalid override {0}")]
    InvalidOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl From<ModelError> for ConfigError {
    fn from(e: ModelError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

/// Optimization and logging settings of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Tokens to train on; `None` uses 20 tokens per parameter.
    pub token_budget: Option<u64>,
    pub batch_size: usize,
    pub seq_len: usize,
    pub peak_lr: f64,
    pub min_lr_ratio: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    /// Steps between validation passes; 0 disables them.
    pub eval_every: u64,
    /// Validation windows used by periodic evaluation; 0 means all.
    pub eval_windows: usize,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Seed of the batch-order stream.
    pub data_seed: u64,
    /// Seed of the Depth initial-state stream.
    pub depth_seed: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            token_budget: None,
            batch_size: 8,
            seq_len: 256,
            peak_lr: 3e-4,
            min_lr_ratio: 0.1,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            eval_every: 0,
            eval_windows: 16,
            checkpoint_every: 0,
            data_seed: 0,
            depth_seed: 0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn tokens_per_step(&self) -> u64 {
        (self.batch_size * self.seq_len) as u64
    }

    pub fn resolved_token_budget(&self, model: &ModelConfig) -> u64 {
        self.token_budget
            .unwrap_or_else(|| cot_tokens(crate::model::count_params(model).total()))
    }

    pub fn schedule(&self, model: &ModelConfig) -> WsdSchedule {
        WsdSchedule::from_tokens(
            self.resolved_token_budget(model),
            self.tokens_per_step(),
            self.peak_lr,
            self.min_lr_ratio,
        )
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Invalid(m));
        if self.batch_size == 0 || self.seq_len == 0 {
            return fail("train.batch_size and train.seq_len must be positive".into());
        }
        if self.seq_len > model.max_seq_len {
            return fail(format!(
                "train.seq_len {} exceeds model.max_seq_len {}",
                self.seq_len, model.max_seq_len
            ));
        }
        if self.peak_lr.is_nan() || self.peak_lr <= 0.0 || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return fail("train.peak_lr must be > 0 and train.min_lr_ratio in [0, 1]".into());
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return fail("train.grad_clip must be > 0".into());
        }
        if self.schedule(model).total_steps == 0 {
            return fail(format!(
                "token budget {} is smaller than one step of {} tokens",
                self.resolved_token_budget(model),
                self.tokens_per_step()
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Files concatenated in order to form the corpus.
    pub corpus: Vec<PathBuf>,
    /// Trailing fraction held out for validation.
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: Vec::new(),
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Iteration counts for sweeps.
    pub iters: Vec<usize>,
    /// Seed of the Depth initial state at evaluation.
    pub depth_seed: u64,
    /// Sequences per evaluation forward pass.
    pub batch_size: usize,
    /// Cap on validation windows; 0 means all.
    pub max_windows: usize,
    /// Multiple-choice task file (JSON lines).
    pub task: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iters: vec![1, 2, 4, 8],
            depth_seed: crate::model::DEFAULT_EVAL_DEPTH_SEED,
            batch_size: 8,
            max_windows: 0,
            task: None,
        }
    }
}

/// Everything a command needs, as read from a config file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        from_table(table, None)
    }

    /// Reads `path` (if any) and applies `overrides` of the form
    /// `section.key=value` in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                let mut t: toml::Table = text
                    .parse()
                    .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
                // Relative corpus and task paths resolve against the file.
                resolve_paths(&mut t, p.parent().unwrap_or(Path::new("")));
                t
            }
            None => toml::Table::new(),
        };
        from_table(table.clone(), None)?;
        for o in overrides {
            apply_override(&mut table, o)?;
            from_table(table.clone(), Some(o))?;
        }
        let cfg = from_table(table, None)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.train.validate(&self.model)?;
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(ConfigError::Invalid("data.val_fraction must be in [0, 1)".into()));
        }
        if self.eval.iters.contains(&0) || self.eval.batch_size == 0 {
            return Err(ConfigError::Invalid(
                "eval.iters and eval.batch_size must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Fully resolved config as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn resolve_paths(t: &mut toml::Table, base: &Path) {
    let fix = |v: &mut toml::Value| {
        if let toml::Value::String(s) = v {
            let p = Path::new(s.as_str());
            if p.is_relative() {
                *s = base.join(p).to_string_lossy().into_owned();
            }
        }
    };
    if let Some(toml::Value::Table(data)) = t.get_mut("data") {
        if let Some(toml::Value::Array(files)) = data.get_mut("corpus") {
            files.iter_mut().for_each(fix);
        }
    }
    if let Some(toml::Value::Table(eval)) = t.get_mut("eval") {
        if let Some(task) = eval.get_mut("task") {
            fix(task);
        }
    }
}

fn from_table(table: toml::Table, via: Option<&str>) -> Result<RunConfig, ConfigError> {
    RunConfig::deserialize(table).map_err(|e| {
        let msg = e.to_string();
        match (msg.contains("unknown field"), via) {
            (true, Some(o)) => ConfigError::UnknownKey(format!("{o}: {}", msg.trim())),
            (true, None) => ConfigError::UnknownKey(msg.trim().to_string()),
            (false, Some(o)) => ConfigError::InvalidOverride(format!("{o}: {}", msg.trim())),
            (false, None) => ConfigError::Parse(msg.trim().to_string()),
        }
    })
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let parsed = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"));
    match parsed {
        // `4e7` style integers arrive as floats.
        Some(toml::Value::Float(f)) if f.fract() == 0.0 && f.abs() < 9.0e15 => toml::Value::Integer(f as i64),
        Some(v) => v,
        None => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut toml::Table, o: &str) -> Result<(), ConfigError> {
    let bad = || ConfigError::InvalidOverride(format!("{o}: expected section.key=value"));
    let (path, raw) = o.split_once('=').ok_or_else(bad)?;
    let (section, key) = path.trim().split_once('.').ok_or_else(bad)?;
    if section.is_empty() || key.is_empty() || key.contains('.') {
        return Err(bad());
    }
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let toml::Value::Table(sec) = entry else {
        return Err(ConfigError::UnknownKey(section.to_string()));
    };
    sec.insert(key.to_string(), parse_value(raw.trim()));
    Ok(())
}
