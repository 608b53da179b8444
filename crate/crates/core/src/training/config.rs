//! Training hyperparameters and the `key = value` configuration format.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Pointwise,
    Pairwise,
    Hinge,
    Mlm,
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pointwise" => Ok(Objective::Pointwise),
            "pairwise" => Ok(Objective::Pairwise),
            "hinge" => Ok(Objective::Hinge),
            "mlm" => Ok(Objective::Mlm),
            other => Err(Error::Config(format!("unknown objective `{other}`"))),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Pointwise => "pointwise",
            Objective::Pairwise => "pairwise",
            Objective::Hinge => "hinge",
            Objective::Mlm => "mlm",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub batch_size: usize,
    pub base_lr: f64,
    pub epochs: usize,
    pub max_len: usize,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub seed: u64,
    pub dropout: f64,
    /// Hinge margin `M`, or the ranking margin of the pairwise loss.
    pub margin: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub mask_rate: f64,
}

impl TrainConfig {
    /// Cross-encoder fine-tuning: 3 epochs, batch 16, lr 3e-6, weight decay
    /// 0.01, 10,000 warmup steps, max length 128; pairwise weights 0.5/0.5
    /// with margin 0.2.
    pub fn cross_encoder(objective: Objective) -> Self {
        Self {
            objective,
            batch_size: 16,
            base_lr: 3e-6,
            epochs: 3,
            max_len: 128,
            weight_decay: 0.01,
            warmup_steps: 10_000,
            seed: 42,
            dropout: 0.1,
            margin: 0.2,
            lambda1: 0.5,
            lambda2: 0.5,
            mask_rate: 0.15,
        }
    }

    /// QA-LSTM: 3 epochs, batch 64, lr 1e-3, hinge margin 0.2.
    pub fn qa_lstm() -> Self {
        Self {
            objective: Objective::Hinge,
            batch_size: 64,
            base_lr: 1e-3,
            epochs: 3,
            max_len: 128,
            weight_decay: 0.0,
            warmup_steps: 0,
            seed: 42,
            dropout: 0.2,
            ..Self::cross_encoder(Objective::Hinge)
        }
    }

    /// Masked-LM further pre-training: 1 epoch, batch 8.
    pub fn mlm() -> Self {
        Self {
            batch_size: 8,
            epochs: 1,
            ..Self::cross_encoder(Objective::Mlm)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::Config(format!("mask_rate {} outside [0, 1]", self.mask_rate)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    /// Applies one setting. Returns `Ok(false)` for keys this type does not
    /// own, so callers can layer other settings on the same file.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("`{key}` expects a number, got `{value}`")))
        }
        match key {
            "objective" => self.objective = value.parse()?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" | "base_lr" => self.base_lr = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "warmup_steps" => self.warmup_steps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "margin" => self.margin = num(key, value)?,
            "lambda1" => self.lambda1 = num(key, value)?,
            "lambda2" => self.lambda2 = num(key, value)?,
            "mask_rate" => self.mask_rate = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Parses `key = value` lines. Blank lines and text after `#` are ignored;
/// later duplicates override earlier ones.
pub fn parse_key_values(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::malformed(path, i + 1, "expected `key = value`"));
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::malformed(path, i + 1, "empty key"));
        }
        out.insert(key.to_string(), value.trim().to_string());
    }
    Ok(out)
}
