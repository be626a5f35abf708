//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Values are written without quotes. Every key must be one of the fields of
//! [`RunConfig`]; anything else is rejected. Settings are merged as
//! defaults, then the config file, then command-line overrides, and
//! [`RunConfig::to_text`] writes a file that parses back to the same value.
//!
//! ```
//! use vqprompt::config::RunConfig;
//! let cfg = RunConfig::from_text("# desk run\nseed = 7\nvariant = vq_naive\n").unwrap();
//! assert_eq!(cfg.seed, 7);
//! assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
//! assert!(RunConfig::from_text("sede = 7").is_err());
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::metrics::{Level, MetricConfig};
use crate::model::{DecodeMode, DecodingConfig, ModelConfig};
use crate::numerics::Dtype;
use crate::text::DEFAULT_MAX_LEN;
use crate::trainer::{PretrainConfig, TrainingConfig, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dtype: Dtype,

    pub n_per_rule: usize,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    pub min_count: usize,
    pub max_len: usize,

    pub d_model: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub max_positions: usize,

    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch_size: usize,
    pub pretrain_noise: f64,

    pub variant: Variant,
    pub prompt_len: usize,
    pub prompt_layers: usize,
    pub share_embeddings: bool,
    pub codebook_size: usize,
    pub threshold: usize,
    pub staleness: u64,
    pub window: u64,
    pub revival_every: u64,
    pub buffer_capacity: usize,
    pub kmeans_sample: usize,
    pub naive_codebook_std: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub commitment_weight: f64,
    pub val_limit: usize,

    pub alpha: f64,
    pub max_output_len: usize,
    pub decode_mode: DecodeMode,
    pub beam_width: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainingConfig::default();
        let p = PretrainConfig::default();
        let m = ModelConfig::desk(0);
        Self {
            seed: 0,
            dtype: Dtype::F32,
            n_per_rule: 150,
            train_ratio: 0.8,
            val_ratio: 0.1,
            test_ratio: 0.1,
            min_count: 1,
            max_len: DEFAULT_MAX_LEN,
            d_model: m.d_model,
            heads: m.heads,
            ff_hidden: m.ff_hidden,
            encoder_layers: m.encoder_layers,
            decoder_layers: m.decoder_layers,
            max_positions: m.max_positions,
            pretrain_epochs: p.epochs,
            pretrain_lr: p.lr,
            pretrain_batch_size: p.batch_size,
            pretrain_noise: p.noise,
            variant: t.variant,
            prompt_len: t.prompt_len,
            prompt_layers: t.prompt_layers,
            share_embeddings: t.share_embeddings,
            codebook_size: t.codebook_size,
            threshold: t.threshold,
            staleness: t.staleness,
            window: t.window,
            revival_every: t.revival_every,
            buffer_capacity: t.buffer_capacity,
            kmeans_sample: t.kmeans_sample,
            naive_codebook_std: t.naive_codebook_std,
            lr: t.lr,
            batch_size: t.batch_size,
            warmup_epochs: t.warmup_epochs,
            epochs: t.epochs,
            commitment_weight: t.commitment_weight,
            val_limit: t.val_limit,
            alpha: t.alpha,
            max_output_len: t.max_output_len,
            decode_mode: DecodeMode::Greedy,
            beam_width: 1,
        }
    }
}

/// Parses `raw` into the JSON type of the existing value `like`.
fn typed(key: &str, raw: &str, like: &Value) -> Result<Value> {
    let err = || Error::Config(format!("bad value `{raw}` for `{key}`"));
    Ok(match like {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| err())?),
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| err())?),
        Value::Number(_) => {
            let v: f64 = raw.parse().map_err(|_| err())?;
            serde_json::Number::from_f64(v).map(Value::Number).ok_or_else(err)?
        }
        Value::String(_) => Value::String(raw.to_string()),
        _ => return Err(err()),
    })
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Number(n) if n.is_f64() => {
            let f = n.as_f64().unwrap_or_default();
            // `{:?}` keeps a decimal point and round-trips exactly
            format!("{f:?}")
        }
        other => other.to_string(),
    }
}

impl RunConfig {
    fn to_map(&self) -> Map<String, Value> {
        match serde_json::to_value(self) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("RunConfig serializes to an object"),
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut map = self.to_map();
        let like = map
            .get(key)
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        let v = typed(key, raw.trim(), like)?;
        map.insert(key.to_string(), v);
        *self = serde_json::from_value(Value::Object(map))
            .map_err(|e| Error::Config(format!("`{key}`: {e}")))?;
        Ok(())
    }

    /// Applies every setting of a config file's text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Defaults, then `file`, then `overrides` (`key=value` strings).
    pub fn merged(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut c = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            c.apply_text(&text)?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            c.set(k.trim(), v)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Every setting, one per line, in field order.
    pub fn to_text(&self) -> String {
        let map = self.to_map();
        let mut out = String::new();
        for (k, v) in &map {
            out.push_str(&format!("{k} = {}\n", render(v)));
        }
        out
    }

    pub fn to_json(&self) -> Value {
        Value::Object(self.to_map())
    }

    pub fn validate(&self) -> Result<()> {
        let r = [self.train_ratio, self.val_ratio, self.test_ratio];
        if r.iter().any(|&x| !(x > 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios {r:?} must be positive and sum to 1")));
        }
        if self.beam_width == 0 {
            return Err(Error::Config("beam_width must be at least 1".into()));
        }
        self.metric().validate()?;
        self.training().validate()
    }

    pub fn training(&self) -> TrainingConfig {
        TrainingConfig {
            variant: self.variant,
            seed: self.seed,
            prompt_len: self.prompt_len,
            prompt_layers: self.prompt_layers,
            share_embeddings: self.share_embeddings,
            codebook_size: self.codebook_size,
            threshold: self.threshold,
            staleness: self.staleness,
            window: self.window,
            revival_every: self.revival_every,
            buffer_capacity: self.buffer_capacity,
            kmeans_sample: self.kmeans_sample,
            naive_codebook_std: self.naive_codebook_std,
            lr: self.lr,
            batch_size: self.batch_size,
            warmup_epochs: self.warmup_epochs,
            epochs: self.epochs,
            commitment_weight: self.commitment_weight,
            max_len: self.max_len,
            max_output_len: self.max_output_len,
            alpha: self.alpha,
            val_limit: self.val_limit,
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            lr: self.pretrain_lr,
            batch_size: self.pretrain_batch_size,
            noise: self.pretrain_noise,
            seed: self.seed,
        }
    }

    /// Architecture of the bare LM (no prompt encoder).
    pub fn lm_model(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            heads: self.heads,
            ff_hidden: self.ff_hidden,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            prompt_len: 0,
            prompt_layers: self.prompt_layers,
            max_positions: self.max_positions,
            share_embeddings: self.share_embeddings,
        }
    }

    pub fn metric(&self) -> MetricConfig {
        MetricConfig {
            alpha: self.alpha,
            level: Level::Corpus,
            ..MetricConfig::default()
        }
    }

    pub fn decoding(&self) -> DecodingConfig {
        DecodingConfig {
            mode: self.decode_mode,
            beam_width: self.beam_width,
            max_output_len: self.max_output_len,
            ..DecodingConfig::default()
        }
    }
}
