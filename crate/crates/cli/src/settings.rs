//! Layered settings: built-in defaults, then the `--config` file, then flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use finrank::index::Bm25Params;
use finrank::neural::encoder::EncoderConfig;
use finrank::neural::lstm::LstmConfig;
use finrank::training::{parse_key_values, Objective, TrainConfig};

use crate::failure::Failure;
use crate::Common;

/// Keys read by the CLI itself rather than by `TrainConfig`.
const CLI_KEYS: &[&str] = &[
    "k1", "b", "pool_size", "top_k", "cap", "min_count", "encoder", "n_layers", "d_model", "n_heads", "d_ff",
    "embed_dim", "hidden",
];

const TRAIN_KEYS: &[&str] = &[
    "objective",
    "batch_size",
    "lr",
    "base_lr",
    "epochs",
    "max_len",
    "weight_decay",
    "warmup_steps",
    "seed",
    "dropout",
    "margin",
    "lambda1",
    "lambda2",
    "mask_rate",
];

pub const DEFAULT_POOL_SIZE: usize = 50;
pub const DEFAULT_TOP_K: usize = 10;
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone)]
pub struct Settings {
    pub data_dir: PathBuf,
    pub allow_vocab_mismatch: bool,
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn resolve(common: &Common) -> Result<Self, Failure> {
        let mut values = match &common.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
                parse_key_values(&text, path)?
            }
            None => BTreeMap::new(),
        };
        if let Some(key) = values
            .keys()
            .find(|k| !CLI_KEYS.contains(&k.as_str()) && !TRAIN_KEYS.contains(&k.as_str()))
        {
            return Err(Failure::usage(format!("unknown config key `{key}`")));
        }
        let flags: [(&str, Option<String>); 9] = [
            ("seed", common.seed.map(|v| v.to_string())),
            ("k1", common.k1.map(|v| v.to_string())),
            ("b", common.b.map(|v| v.to_string())),
            ("pool_size", common.pool_size.map(|v| v.to_string())),
            ("top_k", common.top_k.map(|v| v.to_string())),
            ("max_len", common.max_len.map(|v| v.to_string())),
            ("batch_size", common.batch_size.map(|v| v.to_string())),
            ("lr", common.lr.map(|v| v.to_string())),
            ("epochs", common.epochs.map(|v| v.to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                if key == "lr" {
                    values.remove("base_lr");
                }
                values.insert(key.to_string(), v);
            }
        }
        let data_dir = common
            .data_dir
            .clone()
            .or_else(|| std::env::var_os("FINRANK_DATA_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Self {
            data_dir,
            allow_vocab_mismatch: common.allow_vocab_mismatch,
            values,
        })
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, Failure> {
        self.values
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Failure::usage(format!("`{key}` has invalid value `{v}`")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, Failure> {
        Ok(self.get_opt(key)?.unwrap_or(default))
    }

    pub fn seed(&self) -> Result<u64, Failure> {
        self.get_or("seed", DEFAULT_SEED)
    }

    pub fn pool_size(&self) -> Result<usize, Failure> {
        let n = self.get_or("pool_size", DEFAULT_POOL_SIZE)?;
        if n == 0 {
            return Err(Failure::usage("pool_size must be at least 1"));
        }
        Ok(n)
    }

    pub fn top_k(&self) -> Result<usize, Failure> {
        let n = self.get_or("top_k", DEFAULT_TOP_K)?;
        if n == 0 {
            return Err(Failure::usage("top_k must be at least 1"));
        }
        Ok(n)
    }

    pub fn bm25(&self) -> Result<Bm25Params, Failure> {
        let d = Bm25Params::default();
        Ok(Bm25Params::new(self.get_or("k1", d.k1)?, self.get_or("b", d.b)?)?)
    }

    /// The preset for `objective` with every training key applied on top.
    pub fn train_config(&self, objective: Objective) -> Result<TrainConfig, Failure> {
        let mut cfg = match objective {
            Objective::Hinge => TrainConfig::qa_lstm(),
            Objective::Mlm => TrainConfig::mlm(),
            o => TrainConfig::cross_encoder(o),
        };
        cfg.seed = self.seed()?;
        for (k, v) in &self.values {
            if k != "objective" && k != "seed" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn encoder_config(&self, vocab_size: usize, train: &TrainConfig) -> Result<EncoderConfig, Failure> {
        let mut c = match self.values.get("encoder").map(String::as_str) {
            None | Some("desk") => EncoderConfig::desk(vocab_size),
            Some("base") => EncoderConfig::base(vocab_size),
            Some(other) => return Err(Failure::usage(format!("unknown encoder size `{other}`"))),
        };
        c.n_layers = self.get_or("n_layers", c.n_layers)?;
        c.d_model = self.get_or("d_model", c.d_model)?;
        c.n_heads = self.get_or("n_heads", c.n_heads)?;
        c.d_ff = self.get_or("d_ff", c.d_ff)?;
        c.max_len = train.max_len;
        c.dropout = train.dropout;
        c.validate()?;
        Ok(c)
    }

    pub fn lstm_config(&self, vocab_size: usize, train: &TrainConfig) -> Result<LstmConfig, Failure> {
        let mut c = LstmConfig::standard(vocab_size);
        c.embed_dim = self.get_or("embed_dim", c.embed_dim)?;
        c.hidden = self.get_or("hidden", c.hidden)?;
        c.max_len = train.max_len;
        c.dropout = train.dropout;
        c.validate()?;
        Ok(c)
    }

    /// Every explicitly set value, for the manifest.
    pub fn explicit(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn data(&self, name: &str) -> PathBuf {
        self.data_dir.join(name)
    }
}
