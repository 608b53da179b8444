//! `FRCK` checkpoint files: a JSON header followed by named `f32` tensors.
//!
//! Layout (little-endian): magic `FRCK`, `u32` version, `u64` header length,
//! header JSON, `u64` tensor count, then per tensor a `u32`-prefixed name,
//! `u32` rank, `u64` dims and `f32` values. Optimizer moments are stored as
//! tensors named `adam.m/<param>` and `adam.v/<param>`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::{put_str, ByteReader};
use crate::neural::encoder::{CrossEncoder, EncoderConfig};
use crate::neural::lstm::{LstmConfig, QaLstm};
use crate::neural::{AdamState, ParameterStore, Tensor};
use crate::textenc::Vocabulary;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"FRCK";
const MOMENT_M: &str = "adam.m/";
const MOMENT_V: &str = "adam.v/";

/// Architecture of the stored weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "snake_case")]
pub enum ModelSpec {
    CrossEncoder(EncoderConfig),
    QaLstm(LstmConfig),
    /// Encoder weights only, as produced by masked-LM pre-training.
    Encoder(EncoderConfig),
}

impl ModelSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelSpec::CrossEncoder(_) => "cross_encoder",
            ModelSpec::QaLstm(_) => "qa_lstm",
            ModelSpec::Encoder(_) => "encoder",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: ParameterStore,
    pub v: ParameterStore,
}

impl From<&AdamState> for OptimizerState {
    fn from(s: &AdamState) -> Self {
        Self {
            step: s.step,
            m: s.m.clone(),
            v: s.v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelSpec,
    pub vocab_hash: String,
    pub params: ParameterStore,
    pub optimizer: Option<OptimizerState>,
    pub history: Vec<EpochRecord>,
    /// Zero-based index into `history`.
    pub best_epoch: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelSpec,
    vocab_hash: String,
    history: Vec<EpochRecord>,
    best_epoch: Option<usize>,
    optimizer_step: Option<u64>,
}

impl Checkpoint {
    /// Snapshot at file precision: every tensor is rounded to `f32`, so a
    /// save/load round trip reproduces it bit for bit.
    pub fn new(model: ModelSpec, vocab_hash: impl Into<String>, params: &ParameterStore) -> Self {
        let mut params = params.clone();
        params.round_to_f32();
        Self {
            model,
            vocab_hash: vocab_hash.into(),
            params,
            optimizer: None,
            history: Vec::new(),
            best_epoch: None,
        }
    }

    pub fn with_optimizer(mut self, state: &AdamState) -> Self {
        let mut opt = OptimizerState::from(state);
        opt.m.round_to_f32();
        opt.v.round_to_f32();
        self.optimizer = Some(opt);
        self
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        let found = vocab.hash();
        if found != self.vocab_hash {
            return Err(Error::VocabMismatch {
                expected: self.vocab_hash.clone(),
                found,
            });
        }
        Ok(())
    }

    pub fn to_cross_encoder(&self) -> Result<CrossEncoder> {
        match &self.model {
            ModelSpec::CrossEncoder(cfg) => {
                let mut model = CrossEncoder::new(cfg.clone(), 0)?;
                for (name, t) in self.params.iter() {
                    model.params.set(name, t.clone())?;
                }
                Ok(model)
            }
            other => Err(Error::Config(format!("checkpoint holds a {} model", other.kind()))),
        }
    }

    pub fn to_qa_lstm(&self) -> Result<QaLstm> {
        match &self.model {
            ModelSpec::QaLstm(cfg) => {
                let mut model = QaLstm::new(cfg.clone(), 0)?;
                for (name, t) in self.params.iter() {
                    model.params.set(name, t.clone())?;
                }
                Ok(model)
            }
            other => Err(Error::Config(format!("checkpoint holds a {} model", other.kind()))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.clone(),
            vocab_hash: self.vocab_hash.clone(),
            history: self.history.clone(),
            best_epoch: self.best_epoch,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);

        let mut tensors: Vec<(String, &Tensor)> = self.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
        if let Some(opt) = &self.optimizer {
            tensors.extend(opt.m.iter().map(|(n, t)| (format!("{MOMENT_M}{n}"), t)));
            tensors.extend(opt.v.iter().map(|(n, t)| (format!("{MOMENT_V}{n}"), t)));
        }
        out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
        for (name, t) in tensors {
            put_str(&mut out, &name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::BadMagic { expected: "FRCK" });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let header_len = usize::try_from(r.u64("header length")?).map_err(|_| Error::Truncated("header"))?;
        let header: Header = serde_json::from_slice(r.take(header_len, "header")?)
            .map_err(|e| Error::Corrupt(format!("checkpoint header: {e}")))?;
        let count = r.u64("tensor count")?;
        let mut params = ParameterStore::new();
        let mut m = ParameterStore::new();
        let mut v = ParameterStore::new();
        for _ in 0..count {
            let name = r.string("tensor name")?;
            let rank = r.u32("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64("tensor dims")?).map_err(|_| Error::Corrupt("dimension".into()))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4).map(|_| n))
                .ok_or_else(|| Error::Corrupt(format!("tensor `{name}` is too large")))?;
            let raw = r.take(n * 4, "tensor values")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| Error::Corrupt(e.to_string()))?;
            let (store, key) = if let Some(rest) = name.strip_prefix(MOMENT_M) {
                (&mut m, rest)
            } else if let Some(rest) = name.strip_prefix(MOMENT_V) {
                (&mut v, rest)
            } else {
                (&mut params, name.as_str())
            };
            store
                .insert(key, tensor)
                .map_err(|_| Error::Corrupt(format!("duplicate tensor `{name}`")))?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt("trailing bytes after tensors".into()));
        }
        let optimizer = match header.optimizer_step {
            Some(step) => {
                if !params.same_layout(&m) || !params.same_layout(&v) {
                    return Err(Error::Corrupt("optimizer moments do not match parameters".into()));
                }
                Some(OptimizerState { step, m, v })
            }
            None if m.is_empty() && v.is_empty() => None,
            None => return Err(Error::Corrupt("moments present without optimizer step".into())),
        };
        if let Some(best) = header.best_epoch {
            if best >= header.history.len() {
                return Err(Error::Corrupt(format!("best epoch {best} outside history")));
            }
        }
        Ok(Self {
            model: header.model,
            vocab_hash: header.vocab_hash,
            params,
            optimizer,
            history: header.history,
            best_epoch: header.best_epoch,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
