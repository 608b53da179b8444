//! Differentiable model core shared by both neural re-rankers.
//!
//! The free functions here evaluate activations and losses directly on
//! numbers; [`loss`] holds the graph versions used during training.

pub mod adam;
pub mod encoder;
pub mod graph;
pub mod loss;
pub mod lstm;
pub mod params;
pub mod tensor;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_step, AdamState, LrSchedule};
pub use encoder::{encoder_forward, multi_head_attention, EncoderConfig};
pub use graph::{Graph, Var};
pub use lstm::{bilstm_forward, LstmConfig};
pub use params::{Init, ParamSpec, ParameterStore};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Clamp applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax. Panics on an empty slice.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    assert!(!z.is_empty(), "softmax of an empty vector");
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("cosine of lengths {} and {}", u.len(), v.len())));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Scaled dot-product attention `softmax(QKᵀ/√d_k)V`; keys whose `key_mask`
/// entry is false receive zero weight.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, key_mask: Option<&[bool]>) -> Result<Tensor> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::Shape(format!(
            "attention Q {:?}, K {:?}, V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let mut g = Graph::detached();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = encoder::attention_var(&mut g, qv, kv, vv, key_mask)?;
    Ok(g.value(out).clone())
}

/// `max{0, M − cos⁺ + cos⁻}`.
pub fn loss_hinge(cos_pos: f64, cos_neg: f64, margin: f64) -> f64 {
    (margin - cos_pos + cos_neg).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointwiseLoss {
    pub sum: f64,
    pub mean: f64,
}

/// Binary cross-entropy summed over samples, probabilities clamped to
/// `[PROB_EPS, 1 − PROB_EPS]`.
pub fn loss_pointwise(probs: &[f64], labels: &[u8]) -> Result<PointwiseLoss> {
    if probs.len() != labels.len() {
        return Err(Error::Shape("probabilities and labels differ in length".into()));
    }
    let sum: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if *y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(PointwiseLoss {
        sum,
        mean: if probs.is_empty() { 0.0 } else { sum / probs.len() as f64 },
    })
}

/// `−λ1(log ŷ⁺ + log(1 − ŷ⁻)) + λ2·max{0, m − ŷ⁺ + ŷ⁻}`.
pub fn loss_pairwise(y_pos: f64, y_neg: f64, lambda1: f64, lambda2: f64, margin: f64) -> f64 {
    let p = y_pos.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let n = y_neg.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -lambda1 * (p.ln() + (1.0 - n).ln()) + lambda2 * (margin - p + n).max(0.0)
}

/// Mean negative log-likelihood of `target_ids` at `masked_positions`, with
/// one row of `token_logits` per sequence position.
pub fn loss_mlm(token_logits: &Tensor, target_ids: &[usize], masked_positions: &[usize]) -> Result<f64> {
    if masked_positions.is_empty() {
        return Err(Error::NoMaskedPositions);
    }
    if target_ids.len() != masked_positions.len() {
        return Err(Error::Shape("one target per masked position".into()));
    }
    let mut total = 0.0;
    for (&pos, &target) in masked_positions.iter().zip(target_ids) {
        if pos >= token_logits.rows() || target >= token_logits.cols() {
            return Err(Error::Shape(format!("position {pos} / target {target} out of range")));
        }
        let probs = softmax(token_logits.row_slice(pos));
        total -= probs[target].ln();
    }
    Ok(total / masked_positions.len() as f64)
}

/// Inverted-dropout keep mask: each entry is `1/(1−rate)` with probability
/// `1 − rate`, otherwise 0.
pub fn dropout_scale(n: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if rate <= 0.0 {
        return vec![1.0; n];
    }
    let keep = 1.0 - rate;
    (0..n)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect()
}

/// Stochastic state threaded through a forward pass.
pub struct ForwardCtx {
    pub train: bool,
    pub rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        use rand::SeedableRng;
        Self {
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        Self { train: true, rng }
    }

    /// Applies dropout in train mode; identity otherwise.
    pub fn dropout(&mut self, g: &mut Graph, x: Var, rate: f64) -> Result<Var> {
        if !self.train || rate <= 0.0 {
            return Ok(x);
        }
        let scale = dropout_scale(g.value(x).len(), rate, &mut self.rng);
        g.dropout_mask(x, scale)
    }
}
