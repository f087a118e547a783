//! Flat key=value configuration with file, environment, and command-line
//! override layers. Unknown keys are an error; every run can write back a
//! resolved snapshot that reproduces it.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::schedule::Rounding;
use crate::train::{LrScheduleKind, PlanChoice, TrainConfig};

/// Environment override prefix: `ARDIFF_LR=1e-3` sets key `lr`.
pub const ENV_PREFIX: &str = "ARDIFF_";

const KNOWN_KEYS: &[&str] = &[
    // training
    "lr",
    "lr_schedule",
    "warmup_steps",
    "batch_size",
    "max_steps",
    "grad_accum",
    "seed",
    "total_steps",
    "max_tgt_len",
    "plan",
    "anchor_pos",
    "anchor_t",
    "rounding",
    "schedule_offset",
    "log_every",
    "snapshot_every",
    "log_timing",
    // model
    "vocab_size",
    "embed_dim",
    "layers",
    "heads",
    "ffn_dim",
    "max_src_len",
    "dropout",
];

/// Layered flat key=value store.
#[derive(Debug, Clone, Default)]
pub struct FlatConfig {
    map: BTreeMap<String, String>,
}

impl FlatConfig {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parse a `key = value` file; `#` starts a comment line.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {path:?}: {e}")))?;
        let mut cfg = Self::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected key=value", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown config key: {key}")));
        }
        self.map.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Apply `ARDIFF_*` environment variables.
    pub fn apply_env(&mut self) -> Result<()> {
        let mut vars: Vec<(String, String)> = std::env::vars()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        vars.sort();
        for (k, v) in vars {
            let key = k[ENV_PREFIX.len()..].to_lowercase();
            self.set(&key, &v)?;
        }
        Ok(())
    }

    /// Apply `key=value` command-line overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for item in overrides {
            let (key, value) = item.split_once('=').ok_or_else(|| {
                Error::Config(format!("override '{item}' is not key=value"))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.map.get(key) {
            None => Ok(default),
            Some(raw) => raw.parse::<T>().map_err(|_| {
                Error::Config(format!("config key {key}: cannot parse '{raw}'"))
            }),
        }
    }

    fn parse_opt<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::Config(format!("config key {key}: cannot parse '{raw}'"))),
        }
    }

    /// Resolve against defaults into the training and model settings.
    pub fn resolve(&self) -> Result<ResolvedConfig> {
        let defaults = TrainConfig::default();
        let model_defaults = ModelConfig::default();
        let rounding = match self.map.get("rounding").map(String::as_str) {
            None => defaults.rounding,
            Some("nearest") => Rounding::Nearest,
            Some("floor") => Rounding::Floor,
            Some(other) => {
                return Err(Error::Config(format!("unknown rounding mode {other}")))
            }
        };
        let train = TrainConfig {
            lr: self.parse("lr", defaults.lr)?,
            lr_schedule: self.parse("lr_schedule", defaults.lr_schedule)?,
            warmup_steps: self.parse("warmup_steps", defaults.warmup_steps)?,
            batch_size: self.parse("batch_size", defaults.batch_size)?,
            max_steps: self.parse("max_steps", defaults.max_steps)?,
            grad_accum: self.parse("grad_accum", defaults.grad_accum)?,
            seed: self.parse("seed", defaults.seed)?,
            total_steps: self.parse("total_steps", defaults.total_steps)?,
            max_tgt_len: self.parse("max_tgt_len", defaults.max_tgt_len)?,
            plan: self.parse("plan", defaults.plan)?,
            anchor_pos: self.parse_opt("anchor_pos")?,
            anchor_t: self.parse_opt("anchor_t")?,
            rounding,
            schedule_offset: self.parse("schedule_offset", defaults.schedule_offset)?,
            log_every: self.parse("log_every", defaults.log_every)?,
            snapshot_every: self.parse("snapshot_every", defaults.snapshot_every)?,
            log_timing: self.parse("log_timing", defaults.log_timing)?,
        };
        train.validate()?;
        let model = ModelSettings {
            vocab_size: self.parse_opt("vocab_size")?,
            embed_dim: self.parse("embed_dim", model_defaults.embed_dim)?,
            layers: self.parse("layers", model_defaults.layers)?,
            heads: self.parse("heads", model_defaults.heads)?,
            ffn_dim: self.parse("ffn_dim", model_defaults.ffn_dim)?,
            max_src_len: self.parse("max_src_len", model_defaults.max_src_len)?,
            dropout: self.parse("dropout", model_defaults.dropout)?,
        };
        Ok(ResolvedConfig { train, model })
    }
}

/// Model knobs before the vocabulary size is known.
#[derive(Debug, Clone)]
pub struct ModelSettings {
    pub vocab_size: Option<usize>,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_src_len: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub train: TrainConfig,
    pub model: ModelSettings,
}

impl ResolvedConfig {
    /// Final model configuration given the corpus vocabulary size.
    pub fn model_config(&self, vocab_len: usize) -> Result<ModelConfig> {
        let config = ModelConfig {
            vocab_size: self.model.vocab_size.unwrap_or(vocab_len),
            embed_dim: self.model.embed_dim,
            layers: self.model.layers,
            heads: self.model.heads,
            ffn_dim: self.model.ffn_dim,
            max_src_len: self.model.max_src_len,
            max_tgt_len: self.train.max_tgt_len,
            dropout: self.model.dropout,
        };
        config.validate()?;
        Ok(config)
    }

    /// Sorted `key=value` snapshot with every effective value materialized.
    pub fn snapshot(&self, model: &ModelConfig) -> String {
        let t = &self.train;
        let mut entries: BTreeMap<&str, String> = BTreeMap::new();
        entries.insert("lr", format!("{}", t.lr));
        entries.insert(
            "lr_schedule",
            match t.lr_schedule {
                LrScheduleKind::Constant => "constant".into(),
                LrScheduleKind::Cosine => "cosine".into(),
            },
        );
        entries.insert("warmup_steps", t.warmup_steps.to_string());
        entries.insert("batch_size", t.batch_size.to_string());
        entries.insert("max_steps", t.max_steps.to_string());
        entries.insert("grad_accum", t.grad_accum.to_string());
        entries.insert("seed", t.seed.to_string());
        entries.insert("total_steps", t.total_steps.to_string());
        entries.insert("max_tgt_len", t.max_tgt_len.to_string());
        entries.insert(
            "plan",
            match t.plan {
                PlanChoice::Anchored => "anchored".into(),
                PlanChoice::Uniform => "uniform".into(),
            },
        );
        entries.insert(
            "anchor_pos",
            format!("{}", t.anchor_pos.unwrap_or(2.0 * t.max_tgt_len as f64)),
        );
        entries.insert(
            "anchor_t",
            format!("{}", t.anchor_t.unwrap_or(t.total_steps as f64)),
        );
        entries.insert(
            "rounding",
            match t.rounding {
                Rounding::Nearest => "nearest".into(),
                Rounding::Floor => "floor".into(),
            },
        );
        entries.insert("schedule_offset", format!("{}", t.schedule_offset));
        entries.insert("log_every", t.log_every.to_string());
        entries.insert("snapshot_every", t.snapshot_every.to_string());
        entries.insert("log_timing", t.log_timing.to_string());
        entries.insert("vocab_size", model.vocab_size.to_string());
        entries.insert("embed_dim", model.embed_dim.to_string());
        entries.insert("layers", model.layers.to_string());
        entries.insert("heads", model.heads.to_string());
        entries.insert("ffn_dim", model.ffn_dim.to_string());
        entries.insert("max_src_len", model.max_src_len.to_string());
        entries.insert("dropout", format!("{}", model.dropout));
        let mut out = String::new();
        for (k, v) in entries {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}
