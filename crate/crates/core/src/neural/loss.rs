//! Training objectives as graph nodes. Each mirrors the scalar function of
//! the same name in the parent module.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use super::PROB_EPS;
use crate::error::{Error, Result};

/// `max{0, M − cos⁺ + cos⁻}` on `1 × 1` nodes.
pub fn hinge(g: &mut Graph, cos_pos: Var, cos_neg: Var, margin: f64) -> Result<Var> {
    let gap = g.sub(cos_neg, cos_pos)?;
    let shifted = g.add_scalar(gap, margin);
    Ok(g.relu(shifted))
}

/// Summed binary cross-entropy of a `1 × n` row of probabilities.
pub fn pointwise(g: &mut Graph, probs: Var, labels: &[u8]) -> Result<Var> {
    if g.value(probs).len() != labels.len() {
        return Err(Error::Shape("probabilities and labels differ in length".into()));
    }
    let p = g.clamp(probs, PROB_EPS, 1.0 - PROB_EPS);
    let y = g.constant(Tensor::row(labels.iter().map(|&l| f64::from(l)).collect()));
    let not_y = g.constant(Tensor::row(labels.iter().map(|&l| 1.0 - f64::from(l)).collect()));
    let log_p = g.log(p);
    let neg_p = g.scale(p, -1.0);
    let one_minus = g.add_scalar(neg_p, 1.0);
    let log_q = g.log(one_minus);
    let pos = g.mul(y, log_p)?;
    let neg = g.mul(not_y, log_q)?;
    let both = g.add(pos, neg)?;
    let total = g.sum(both);
    Ok(g.scale(total, -1.0))
}

/// `−λ1(log ŷ⁺ + log(1 − ŷ⁻)) + λ2·max{0, m − ŷ⁺ + ŷ⁻}` on `1 × 1` nodes.
pub fn pairwise(g: &mut Graph, y_pos: Var, y_neg: Var, lambda1: f64, lambda2: f64, margin: f64) -> Result<Var> {
    let p = g.clamp(y_pos, PROB_EPS, 1.0 - PROB_EPS);
    let n = g.clamp(y_neg, PROB_EPS, 1.0 - PROB_EPS);
    let log_p = g.log(p);
    let neg_n = g.scale(n, -1.0);
    let one_minus = g.add_scalar(neg_n, 1.0);
    let log_q = g.log(one_minus);
    let ce = g.add(log_p, log_q)?;
    let ce = g.scale(ce, -lambda1);
    let gap = g.sub(n, p)?;
    let gap = g.add_scalar(gap, margin);
    let hinge = g.relu(gap);
    let hinge = g.scale(hinge, lambda2);
    g.add(ce, hinge)
}

/// Mean negative log-likelihood of targets at masked rows of `logits`.
pub fn mlm(g: &mut Graph, logits: Var, target_ids: &[usize], masked_positions: &[usize]) -> Result<Var> {
    if masked_positions.is_empty() {
        return Err(Error::NoMaskedPositions);
    }
    if target_ids.len() != masked_positions.len() {
        return Err(Error::Shape("one target per masked position".into()));
    }
    let log_probs = g.log_softmax_rows(logits);
    let picks: Vec<(usize, usize)> = masked_positions.iter().copied().zip(target_ids.iter().copied()).collect();
    let picked = g.pick(log_probs, &picks)?;
    let mean = g.mean(picked);
    Ok(g.scale(mean, -1.0))
}
