//! Run configuration and its flat `key = value` file format.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::textpipe::MaskingConfig;

/// Every knob of a training run. Field names double as config-file keys and
/// CLI flag names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_peak: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    /// Distillation weight λ.
    pub lambda: f64,
    /// Teacher momentum m.
    pub momentum: f64,
    /// Text-cosine ceiling for hard negatives.
    pub theta_sim: f64,
    pub queue_size: usize,
    pub mask_rate: f64,
    pub mask_prob: f64,
    pub random_prob: f64,
    pub seed: u64,
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vision_layers: usize,
    pub text_layers: usize,
    pub fusion_layers: usize,
    pub proj_dim: usize,
    pub max_text_len: usize,
    pub tau_init: f64,
    pub init_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            warmup_epochs: 2,
            batch_size: 10,
            lr_init: 1e-5,
            lr_peak: 1e-4,
            weight_decay: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            lambda: 0.4,
            momentum: 0.995,
            theta_sim: 0.9,
            queue_size: 4096,
            mask_rate: 0.15,
            mask_prob: 0.8,
            random_prob: 0.1,
            seed: 0,
            image_size: 32,
            patch_size: 8,
            dim: 128,
            heads: 4,
            ffn_dim: 512,
            vision_layers: 2,
            text_layers: 2,
            fusion_layers: 2,
            proj_dim: 64,
            max_text_len: crate::textpipe::DEFAULT_MAX_LEN,
            tau_init: 0.07,
            init_std: 0.02,
        }
    }
}

impl TrainConfig {
    /// Schedule and dimensions used for desk-scale runs on the synthetic
    /// corpus. Differs from [`TrainConfig::default`] in the schedule and the
    /// hard-negative similarity bound.
    pub fn desk() -> Self {
        Self {
            epochs: 12,
            warmup_epochs: 1,
            lr_peak: 3e-4,
            theta_sim: 0.7,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.warmup_epochs > self.epochs {
            return fail(format!(
                "warmup_epochs ({}) exceeds epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.lr_init > 0.0 && self.lr_peak > 0.0 && self.lr_init <= self.lr_peak) {
            return fail("learning rates must satisfy 0 < lr_init <= lr_peak".into());
        }
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return fail(format!("momentum must lie in (0, 1), got {}", self.momentum));
        }
        if !(0.0..=1.0).contains(&self.mask_rate)
            || self.mask_prob < 0.0
            || self.random_prob < 0.0
            || self.mask_prob + self.random_prob > 1.0
        {
            return fail("masking probabilities out of range".into());
        }
        if !(self.beta1 >= 0.0 && self.beta1 < 1.0 && self.beta2 >= 0.0 && self.beta2 < 1.0) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        if !(self.clip_norm > 0.0 && self.adam_eps > 0.0 && self.weight_decay >= 0.0) {
            return fail("clip_norm and adam_eps must be positive, weight_decay non-negative".into());
        }
        self.model_config(crate::textpipe::SPECIALS.len())
            .validate()
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            dim: self.dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            vision_layers: self.vision_layers,
            text_layers: self.text_layers,
            fusion_layers: self.fusion_layers,
            proj_dim: self.proj_dim,
            max_text_len: self.max_text_len,
            vocab_size,
            tau_init: self.tau_init,
            positional: true,
            ln_eps: 1e-6,
            init_std: self.init_std,
        }
    }

    pub fn masking(&self) -> MaskingConfig {
        MaskingConfig {
            rate: self.mask_rate,
            mask_prob: self.mask_prob,
            random_prob: self.random_prob,
        }
    }

    /// Overrides one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut map = match serde_json::to_value(&*self)? {
            Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        let current = map
            .get(key)
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        let parsed = parse_like(current, value)
            .ok_or_else(|| Error::Config(format!("invalid value `{value}` for `{key}`")))?;
        map.insert(key.to_string(), parsed);
        let next: TrainConfig = serde_json::from_value(Value::Object(map))
            .map_err(|e| Error::Config(format!("invalid value `{value}` for `{key}`: {e}")))?;
        *self = next;
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// All keys in declaration order, one per line.
    pub fn to_text(&self) -> String {
        let map: Map<String, Value> = match serde_json::to_value(self) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("config serializes to an object"),
        };
        let mut out = String::new();
        for (k, v) in &map {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn keys() -> Vec<String> {
        match serde_json::to_value(Self::default()) {
            Ok(Value::Object(m)) => m.keys().cloned().collect(),
            _ => unreachable!("config serializes to an object"),
        }
    }
}

fn parse_like(current: &Value, text: &str) -> Option<Value> {
    match current {
        Value::Bool(_) => text.parse::<bool>().ok().map(Value::Bool),
        Value::Number(n) if n.is_u64() => text.parse::<u64>().ok().map(Value::from),
        Value::Number(_) => text
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(Value::from),
        Value::String(_) => Some(Value::String(text.to_string())),
        _ => None,
    }
}
