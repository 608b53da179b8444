//! Transformer encoder and the cross-encoder relevance model built on it.

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{Init, ParamSpec, ParameterStore};
use super::ForwardCtx;
use crate::error::{Error, Result};
use crate::textenc::{PairEncoding, PAD};

pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub n_segments: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// CPU-sized defaults for a given vocabulary.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            max_len: 128,
            vocab_size,
            n_segments: 2,
            dropout: 0.1,
        }
    }

    /// BERT-base dimensions.
    pub fn base(vocab_size: usize) -> Self {
        Self {
            n_layers: 12,
            d_model: 768,
            n_heads: 12,
            d_ff: 3072,
            max_len: 512,
            vocab_size,
            n_segments: 2,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_len == 0 || self.vocab_size == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.n_segments != 2 {
            return Err(Error::Config("encoder expects two segments".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.d_model;
        let mut specs = vec![
            ParamSpec::new("enc.tok_emb", &[self.vocab_size, d], Init::Uniform),
            ParamSpec::new("enc.pos_emb", &[self.max_len, d], Init::Uniform),
            ParamSpec::new("enc.seg_emb", &[self.n_segments, d], Init::Uniform),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("enc.layer{l}.{s}");
            for w in ["wq", "wk", "wv", "wo"] {
                specs.push(ParamSpec::new(p(&format!("attn.{w}")), &[d, d], Init::Uniform));
            }
            for b in ["bq", "bk", "bv", "bo"] {
                specs.push(ParamSpec::new(p(&format!("attn.{b}")), &[1, d], Init::Uniform));
            }
            specs.push(ParamSpec::new(p("ln1.gamma"), &[1, d], Init::Ones));
            specs.push(ParamSpec::new(p("ln1.beta"), &[1, d], Init::Zeros));
            specs.push(ParamSpec::new(p("ff.w1"), &[d, self.d_ff], Init::Uniform));
            specs.push(ParamSpec::new(p("ff.b1"), &[1, self.d_ff], Init::Uniform));
            specs.push(ParamSpec::new(p("ff.w2"), &[self.d_ff, d], Init::Uniform));
            specs.push(ParamSpec::new(p("ff.b2"), &[1, d], Init::Uniform));
            specs.push(ParamSpec::new(p("ln2.gamma"), &[1, d], Init::Ones));
            specs.push(ParamSpec::new(p("ln2.beta"), &[1, d], Init::Zeros));
        }
        specs
    }
}

/// `softmax(QKᵀ/√d_k)V` on graph nodes.
pub fn attention_var(g: &mut Graph, q: Var, k: Var, v: Var, key_mask: Option<&[bool]>) -> Result<Var> {
    let (tq, tk, tv) = (g.value(q), g.value(k), g.value(v));
    if tq.cols() != tk.cols() || tk.rows() != tv.rows() {
        return Err(Error::Shape(format!(
            "attention Q {:?}, K {:?}, V {:?}",
            tq.shape(),
            tk.shape(),
            tv.shape()
        )));
    }
    let d_k = tq.cols() as f64;
    let scores = g.matmul_bt(q, k)?;
    let scores = g.scale(scores, 1.0 / d_k.sqrt());
    let weights = g.softmax_rows(scores, key_mask)?;
    g.matmul(weights, v)
}

fn linear(g: &mut Graph, x: Var, w: &str, b: &str) -> Result<Var> {
    let (wv, bv) = (g.param(w)?, g.param(b)?);
    let y = g.matmul(x, wv)?;
    g.add_row(y, bv)
}

/// Multi-head self-attention over the rows of `x` using the projections
/// stored under `prefix` (`wq`, `bq`, … `wo`, `bo`).
pub fn multi_head_attention(
    g: &mut Graph,
    x: Var,
    prefix: &str,
    n_heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let d = g.value(x).cols();
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(Error::Config(format!("d_model {d} not divisible by {n_heads} heads")));
    }
    let d_k = d / n_heads;
    let q = linear(g, x, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
    let k = linear(g, x, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
    let v = linear(g, x, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
    let heads = (0..n_heads)
        .map(|h| {
            let qh = g.slice_cols(q, h * d_k, d_k)?;
            let kh = g.slice_cols(k, h * d_k, d_k)?;
            let vh = g.slice_cols(v, h * d_k, d_k)?;
            attention_var(g, qh, kh, vh, key_mask)
        })
        .collect::<Result<Vec<_>>>()?;
    let concat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    linear(g, concat, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
}

/// Number of leading positions up to and including the last unmasked one.
fn effective_len(mask: &[u8]) -> Result<usize> {
    mask.iter()
        .rposition(|&m| m == 1)
        .map(|p| p + 1)
        .ok_or(Error::EmptySequence)
}

/// Runs the encoder stack over an encoded sequence.
///
/// Returns the `[CLS]` state (`1 × d_model`) and the states of every position
/// up to the last unmasked one; trailing padding is not computed since masked
/// keys never influence real positions.
pub fn encoder_forward(
    g: &mut Graph,
    input: &PairEncoding,
    cfg: &EncoderConfig,
    ctx: &mut ForwardCtx,
) -> Result<(Var, Var)> {
    if input.ids.len() > cfg.max_len {
        return Err(Error::Config(format!(
            "sequence length {} exceeds encoder max_len {}",
            input.ids.len(),
            cfg.max_len
        )));
    }
    if let Some(&id) = input.ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab: cfg.vocab_size,
        });
    }
    let n = effective_len(&input.mask)?;
    let ids = &input.ids[..n];
    let segments: Vec<usize> = input.segment_ids[..n].iter().map(|&s| s as usize).collect();
    if segments.iter().any(|&s| s >= cfg.n_segments) {
        return Err(Error::Config("segment id out of range".into()));
    }
    let key_mask: Vec<bool> = input.mask[..n].iter().map(|&m| m == 1).collect();
    let positions: Vec<usize> = (0..n).collect();

    let tok_table = g.param("enc.tok_emb")?;
    let pos_table = g.param("enc.pos_emb")?;
    let seg_table = g.param("enc.seg_emb")?;
    let tok = g.gather(tok_table, ids)?;
    let pos = g.gather(pos_table, &positions)?;
    let seg = g.gather(seg_table, &segments)?;
    let x = g.add(tok, pos)?;
    let x = g.add(x, seg)?;
    let mut x = ctx.dropout(g, x, cfg.dropout)?;

    for l in 0..cfg.n_layers {
        let p = format!("enc.layer{l}");
        let attn = multi_head_attention(g, x, &format!("{p}.attn"), cfg.n_heads, Some(&key_mask))?;
        let attn = ctx.dropout(g, attn, cfg.dropout)?;
        let res = g.add(x, attn)?;
        let (g1, b1) = (g.param(&format!("{p}.ln1.gamma"))?, g.param(&format!("{p}.ln1.beta"))?);
        let h = g.layer_norm(res, g1, b1, LAYER_NORM_EPS)?;

        let ff = linear(g, h, &format!("{p}.ff.w1"), &format!("{p}.ff.b1"))?;
        let ff = g.gelu(ff);
        let ff = linear(g, ff, &format!("{p}.ff.w2"), &format!("{p}.ff.b2"))?;
        let ff = ctx.dropout(g, ff, cfg.dropout)?;
        let res = g.add(h, ff)?;
        let (g2, b2) = (g.param(&format!("{p}.ln2.gamma"))?, g.param(&format!("{p}.ln2.beta"))?);
        x = g.layer_norm(res, g2, b2, LAYER_NORM_EPS)?;
    }
    let cls = g.slice_rows(x, 0, 1)?;
    Ok((cls, x))
}

/// Encoder with a two-logit relevance head and an optional masked-LM head.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossEncoder {
    pub config: EncoderConfig,
    pub params: ParameterStore,
}

pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";
pub const MLM_W: &str = "mlm.w";
pub const MLM_B: &str = "mlm.b";

impl CrossEncoder {
    /// Seeded initialization at checkpoint (`f32`) precision; the PAD embedding
    /// row starts at zero.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut specs = config.param_specs();
        specs.push(ParamSpec::new(HEAD_W, &[config.d_model, 2], Init::Uniform));
        specs.push(ParamSpec::new(HEAD_B, &[1, 2], Init::Uniform));
        specs.push(ParamSpec::new(MLM_W, &[config.d_model, config.vocab_size], Init::Uniform));
        specs.push(ParamSpec::new(MLM_B, &[1, config.vocab_size], Init::Uniform));
        let mut params = ParameterStore::init(&specs, seed)?;
        params.round_to_f32();
        let d = config.d_model;
        params.get_mut("enc.tok_emb")?.data_mut()[PAD * d..(PAD + 1) * d].fill(0.0);
        Ok(Self { config, params })
    }

    /// Two relevance logits `[irrelevant, relevant]` as a `1 × 2` node.
    pub fn logits(&self, g: &mut Graph, pair: &PairEncoding, ctx: &mut ForwardCtx) -> Result<Var> {
        let (cls, _) = encoder_forward(g, pair, &self.config, ctx)?;
        linear(g, cls, HEAD_W, HEAD_B)
    }

    /// Probability of the "relevant" class as a `1 × 1` node.
    pub fn relevance(&self, g: &mut Graph, pair: &PairEncoding, ctx: &mut ForwardCtx) -> Result<Var> {
        let logits = self.logits(g, pair, ctx)?;
        let probs = g.softmax_rows(logits, None)?;
        g.pick(probs, &[(0, 1)])
    }

    /// Vocabulary logits for every computed position.
    pub fn mlm_logits(&self, g: &mut Graph, seq: &PairEncoding, ctx: &mut ForwardCtx) -> Result<Var> {
        let (_, states) = encoder_forward(g, seq, &self.config, ctx)?;
        linear(g, states, MLM_W, MLM_B)
    }

    /// Eval-mode relevance probability.
    pub fn score(&self, pair: &PairEncoding) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let p = self.relevance(&mut g, pair, &mut ForwardCtx::eval())?;
        Ok(g.value(p).data()[0])
    }

    /// Copies every `enc.*` tensor from `encoder` into this model.
    pub fn load_encoder_weights(&mut self, encoder: &ParameterStore) -> Result<()> {
        for (name, t) in encoder.iter().filter(|(n, _)| n.starts_with("enc.")) {
            self.params.set(name, t.clone())?;
        }
        Ok(())
    }

    /// The `enc.*` tensors only.
    pub fn encoder_weights(&self) -> ParameterStore {
        let mut out = ParameterStore::new();
        for (name, t) in self.params.iter().filter(|(n, _)| n.starts_with("enc.")) {
            out.insert(name, t.clone()).expect("names are unique");
        }
        out
    }
}
