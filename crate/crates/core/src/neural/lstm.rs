//! Bidirectional LSTM sentence encoder with max pooling, shared between
//! question and answer in the siamese QA-LSTM model.

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{Init, ParamSpec, ParameterStore};
use super::tensor::Tensor;
use super::ForwardCtx;
use crate::error::{Error, Result};
use crate::textenc::{SeqEncoding, PAD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl LstmConfig {
    /// Embedding 100, hidden 256, sequence length 128, dropout 0.2.
    pub fn standard(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 100,
            hidden: 256,
            max_len: 128,
            dropout: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.hidden == 0 || self.max_len == 0 {
            return Err(Error::Config("LSTM dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (e, h) = (self.embed_dim, self.hidden);
        let mut specs = vec![ParamSpec::new(EMBEDDING, &[self.vocab_size, e], Init::Uniform)];
        for dir in ["fwd", "bwd"] {
            specs.push(ParamSpec::new(format!("lstm.{dir}.wx"), &[e, 4 * h], Init::Uniform));
            specs.push(ParamSpec::new(format!("lstm.{dir}.wh"), &[h, 4 * h], Init::Uniform));
            specs.push(ParamSpec::new(format!("lstm.{dir}.b"), &[1, 4 * h], Init::Uniform));
        }
        specs
    }
}

pub const EMBEDDING: &str = "lstm.emb";

/// Runs one direction over the already-embedded rows of `x` in `order`,
/// returning hidden states indexed by position.
fn run_direction(g: &mut Graph, x: Var, dir: &str, hidden: usize, order: &[usize]) -> Result<Vec<Var>> {
    let wx = g.param(&format!("lstm.{dir}.wx"))?;
    let wh = g.param(&format!("lstm.{dir}.wh"))?;
    let b = g.param(&format!("lstm.{dir}.b"))?;
    let xw = g.matmul(x, wx)?;
    let mut h = g.constant(Tensor::zeros(&[1, hidden]));
    let mut c = g.constant(Tensor::zeros(&[1, hidden]));
    let mut states = vec![None; order.len()];
    for &t in order {
        let xt = g.slice_rows(xw, t, 1)?;
        let hw = g.matmul(h, wh)?;
        let z = g.add(xt, hw)?;
        let z = g.add_row(z, b)?;
        let i = g.slice_cols(z, 0, hidden)?;
        let i = g.sigmoid(i);
        let f = g.slice_cols(z, hidden, hidden)?;
        let f = g.sigmoid(f);
        let cand = g.slice_cols(z, 2 * hidden, hidden)?;
        let cand = g.tanh(cand);
        let o = g.slice_cols(z, 3 * hidden, hidden)?;
        let o = g.sigmoid(o);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        c = g.add(keep, write)?;
        let squashed = g.tanh(c);
        h = g.mul(o, squashed)?;
        states[t] = Some(h);
    }
    Ok(states.into_iter().map(|s| s.expect("every position visited")).collect())
}

/// Embeds the unmasked positions of `seq`, runs forward and backward LSTMs,
/// concatenates their states per position and max-pools over positions.
/// Returns a `1 × 2·hidden` node.
pub fn bilstm_forward(g: &mut Graph, seq: &SeqEncoding, cfg: &LstmConfig, ctx: &mut ForwardCtx) -> Result<Var> {
    let ids: Vec<usize> = seq
        .ids
        .iter()
        .zip(&seq.mask)
        .filter(|(_, m)| **m == 1)
        .map(|(id, _)| *id)
        .collect();
    if ids.is_empty() {
        return Err(Error::EmptySequence);
    }
    if let Some(&id) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab: cfg.vocab_size,
        });
    }
    let table = g.param(EMBEDDING)?;
    let x = g.gather(table, &ids)?;
    let n = ids.len();
    let forward: Vec<usize> = (0..n).collect();
    let backward: Vec<usize> = (0..n).rev().collect();
    let hf = run_direction(g, x, "fwd", cfg.hidden, &forward)?;
    let hb = run_direction(g, x, "bwd", cfg.hidden, &backward)?;
    let fwd = g.concat_rows(&hf)?;
    let bwd = g.concat_rows(&hb)?;
    let states = g.concat_cols(&[fwd, bwd])?;
    let pooled = g.max_rows(states)?;
    ctx.dropout(g, pooled, cfg.dropout)
}

/// Siamese biLSTM: one encoder for questions and answers, compared by cosine.
#[derive(Debug, Clone, PartialEq)]
pub struct QaLstm {
    pub config: LstmConfig,
    pub params: ParameterStore,
}

impl QaLstm {
    pub fn new(config: LstmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterStore::init(&config.param_specs(), seed)?;
        params.round_to_f32();
        let e = config.embed_dim;
        params.get_mut(EMBEDDING)?.data_mut()[PAD * e..(PAD + 1) * e].fill(0.0);
        Ok(Self { config, params })
    }

    pub fn encode(&self, g: &mut Graph, seq: &SeqEncoding, ctx: &mut ForwardCtx) -> Result<Var> {
        bilstm_forward(g, seq, &self.config, ctx)
    }

    /// Cosine similarity node between question and answer encodings.
    pub fn similarity(
        &self,
        g: &mut Graph,
        question: &SeqEncoding,
        answer: &SeqEncoding,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let q = self.encode(g, question, ctx)?;
        let a = self.encode(g, answer, ctx)?;
        g.cosine(q, a)
    }

    pub fn score(&self, question: &SeqEncoding, answer: &SeqEncoding) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let s = self.similarity(&mut g, question, answer, &mut ForwardCtx::eval())?;
        Ok(g.value(s).data()[0])
    }

    /// Replaces embedding rows, e.g. with vectors from [`crate::textenc::load_embeddings`].
    pub fn set_embeddings(&mut self, table: Tensor) -> Result<()> {
        self.params.set(EMBEDDING, table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> LstmConfig {
        LstmConfig {
            vocab_size: 8,
            embed_dim: 3,
            hidden: 2,
            max_len: 6,
            dropout: 0.2,
        }
    }

    fn seq(ids: &[usize], len: usize) -> SeqEncoding {
        let mut s = SeqEncoding {
            ids: ids.to_vec(),
            mask: vec![1; ids.len()],
        };
        s.ids.resize(len, PAD);
        s.mask.resize(len, 0);
        s
    }

    fn pooled(model: &QaLstm, s: &SeqEncoding) -> Vec<f64> {
        let mut g = Graph::new(&model.params);
        let v = model.encode(&mut g, s, &mut ForwardCtx::eval()).unwrap();
        g.value(v).data().to_vec()
    }

    #[test]
    fn length_one_pools_its_own_state() {
        let model = QaLstm::new(micro(), 4).unwrap();
        let s = seq(&[5], 1);
        let mut g = Graph::new(&model.params);
        let table = g.param(EMBEDDING).unwrap();
        let x = g.gather(table, &[5]).unwrap();
        let f = run_direction(&mut g, x, "fwd", 2, &[0]).unwrap();
        let b = run_direction(&mut g, x, "bwd", 2, &[0]).unwrap();
        let mut expected = g.value(f[0]).data().to_vec();
        expected.extend_from_slice(g.value(b[0]).data());
        assert_eq!(pooled(&model, &s), expected);
    }

    #[test]
    fn padding_is_ignored() {
        let model = QaLstm::new(micro(), 4).unwrap();
        assert_eq!(pooled(&model, &seq(&[5, 6, 7], 3)), pooled(&model, &seq(&[5, 6, 7], 6)));
    }

    #[test]
    fn fully_masked_is_error() {
        let model = QaLstm::new(micro(), 4).unwrap();
        assert!(matches!(model.score(&seq(&[], 4), &seq(&[5], 4)), Err(Error::EmptySequence)));
    }

    #[test]
    fn identical_texts_have_unit_cosine() {
        let model = QaLstm::new(micro(), 4).unwrap();
        let s = seq(&[2, 6, 7], 6);
        assert!((model.score(&s, &s).unwrap() - 1.0).abs() < 1e-12);
    }
}
