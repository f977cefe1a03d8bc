//! Run configuration: `key = value` lines with `#` comments. Keys are dotted
//! paths into [`RunConfig`], e.g. `sft.lr = 2e-4`.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::corpus::CorpusSpec;
use super::HarnessError;
use crate::grpo::RatioLevel;
use crate::metrics::Smoothing;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub skel_dim: usize,
    pub embed_dim: usize,
    pub d_model: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub tau_init: f64,
    pub tau_prime: f64,
    pub beta_dir: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub epochs: usize,
    /// Adapter learning rate.
    pub lr: f64,
    /// Learning rate of the prefix projector and cue projections.
    pub projector_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub alpha: f64,
    pub beta_hand: f64,
    pub rank: usize,
    pub scale: f64,
    pub dropout: f64,
    /// Fold the adapters into the base weights when saving.
    pub merge: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RftConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Prompts per optimizer step.
    pub batch_size: usize,
    pub group_size: usize,
    pub epsilon_clip: f64,
    pub kl_coefficient: f64,
    pub eps_std: f64,
    pub lambda: f64,
    pub smoothing: Smoothing,
    pub pad_short_targets: bool,
    pub ratio_level: RatioLevel,
    pub refresh_every: usize,
    pub rank: usize,
    pub scale: f64,
    pub dropout: f64,
    pub temperature: f64,
    /// Dev evaluation cadence in steps; 0 evaluates once per epoch.
    pub eval_every: usize,
    /// Step-checkpoint cadence for learning curves; 0 disables.
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeSettings {
    pub beam_width: usize,
    pub max_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    /// Multiplies every stage's epoch count (rounded up, at least 1).
    pub scale: f64,
    pub lr_schedule: Schedule,
    /// Warm-up length as a fraction of a stage's steps (cosine only).
    pub warmup_frac: f64,
    pub log_wall_time: bool,
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub sft: SftConfig,
    pub rft: RftConfig,
    pub decode: DecodeSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scale: 1.0,
            lr_schedule: Schedule::Constant,
            warmup_frac: 0.1,
            log_wall_time: false,
            corpus: CorpusSpec::default(),
            model: ModelConfig { skel_dim: 16, embed_dim: 32, d_model: 32, layers: 2, ffn_hidden: 64 },
            pretrain: PretrainConfig {
                epochs: 200,
                lr: 0.01,
                weight_decay: 0.001,
                batch_size: 8,
                tau_init: 0.1,
                tau_prime: 0.07,
                beta_dir: 0.5,
            },
            sft: SftConfig {
                epochs: 40,
                lr: 2e-4,
                projector_lr: 2e-5,
                weight_decay: 0.0,
                batch_size: 4,
                alpha: 1.0,
                beta_hand: 1.0,
                rank: 16,
                scale: 32.0,
                dropout: 0.3,
                merge: true,
            },
            rft: RftConfig {
                epochs: 2,
                lr: 2e-5,
                batch_size: 8,
                group_size: 8,
                epsilon_clip: 0.2,
                kl_coefficient: 0.04,
                eps_std: 1e-8,
                lambda: 0.5,
                smoothing: Smoothing::AddEps,
                pad_short_targets: false,
                ratio_level: RatioLevel::Token,
                refresh_every: 1,
                rank: 16,
                scale: 32.0,
                dropout: 0.05,
                temperature: 1.0,
                eval_every: 0,
                checkpoint_every: 0,
            },
            decode: DecodeSettings { beam_width: 5, max_len: 300 },
        }
    }
}

impl RunConfig {
    /// Defaults overridden by the lines of `text`.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, text: &str) -> Result<(), HarnessError> {
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            set_path(&mut tree, key.trim(), value.trim()).map_err(|e| HarnessError::Config(format!("line {}: {e}", i + 1)))?;
        }
        *self = serde_json::from_value(tree).map_err(|e| HarnessError::Config(e.to_string()))?;
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        self.apply(&format!("{key} = {value}"))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.corpus.validate()?;
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return bad("scale must be > 0");
        }
        if !(0.0..=1.0).contains(&self.rft.lambda) {
            return bad("rft.lambda must lie in [0, 1]");
        }
        if self.decode.beam_width == 0 || self.decode.max_len == 0 {
            return bad("decode.beam_width and decode.max_len must be >= 1");
        }
        if self.pretrain.batch_size < 2 || self.sft.batch_size == 0 || self.rft.batch_size == 0 {
            return bad("pretrain.batch_size >= 2 and sft/rft batch sizes >= 1 required");
        }
        if !(self.pretrain.tau_init > 0.0 && self.pretrain.tau_prime > 0.0) {
            return bad("temperatures must be > 0");
        }
        if !(0.0..=1.0).contains(&self.pretrain.beta_dir) {
            return bad("pretrain.beta_dir must lie in [0, 1]");
        }
        for d in [self.sft.dropout, self.rft.dropout] {
            if !(0.0..1.0).contains(&d) {
                return bad("adapter dropout must lie in [0, 1)");
            }
        }
        if !(self.rft.temperature > 0.0) {
            return bad("rft.temperature must be > 0");
        }
        Ok(())
    }

    /// `max(1, ceil(epochs * scale))`.
    pub fn scaled(&self, epochs: usize) -> usize {
        ((epochs as f64 * self.scale).ceil() as usize).max(1)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

fn set_path(tree: &mut Value, key: &str, raw: &str) -> Result<(), String> {
    let mut node = tree;
    for part in key.split('.') {
        node = node.get_mut(part).ok_or_else(|| format!("unknown key `{key}`"))?;
    }
    let parsed = match node {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| format!("`{key}` expects true/false, got `{raw}`"))?),
        Value::Number(n) if n.is_u64() => {
            Value::from(raw.parse::<u64>().map_err(|_| format!("`{key}` expects a non-negative integer, got `{raw}`"))?)
        }
        Value::Number(_) => {
            let v: f64 = raw.parse().map_err(|_| format!("`{key}` expects a number, got `{raw}`"))?;
            serde_json::Number::from_f64(v).map(Value::Number).ok_or_else(|| format!("`{key}` must be finite"))?
        }
        Value::String(_) => Value::String(raw.trim_matches('"').to_string()),
        _ => return Err(format!("`{key}` is a section, not a value")),
    };
    *node = parsed;
    Ok(())
}
