//! Bias-corrected Adam with decoupled weight decay and linear warmup.

use serde::{Deserialize, Serialize};

use super::params::ParameterStore;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// `lr(step) = base_lr · min(step / warmup_steps, 1)`; no warmup when
/// `warmup_steps == 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_steps: u64) -> Self {
        Self { base_lr, warmup_steps }
    }

    /// Caps the configured warmup at a tenth of the run, rounded up.
    pub fn for_run(base_lr: f64, configured_warmup: u64, total_steps: u64) -> Self {
        let cap = total_steps.div_ceil(10);
        Self::new(base_lr, configured_warmup.min(cap))
    }

    pub fn lr(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.base_lr;
        }
        self.base_lr * (step as f64 / self.warmup_steps as f64).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParameterStore,
    pub v: ParameterStore,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParameterStore) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
        }
    }
}

/// One update. The step counter advances first, so the first update uses
/// `lr(1)`. Weight decay shrinks weights directly by `lr · weight_decay`.
pub fn adam_step(
    params: &mut ParameterStore,
    grads: &ParameterStore,
    state: &mut AdamState,
    schedule: &LrSchedule,
    weight_decay: f64,
) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) || !params.same_layout(&state.v) {
        return Err(Error::Shape("parameters, gradients and moments differ in layout".into()));
    }
    state.step += 1;
    let t = state.step as f64;
    let lr = schedule.lr(state.step);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    let moments = state.m.iter_mut().zip(state.v.iter_mut());
    for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for k in 0..p.len() {
            let gk = g.data()[k];
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= lr * weight_decay * p[k];
            p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::Tensor;

    fn scalar_store(v: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_store(2.0);
        let g = scalar_store(1.0);
        let mut st = AdamState::new(&p);
        let sched = LrSchedule::new(0.01, 0);
        adam_step(&mut p, &g, &mut st, &sched, 0.0).unwrap();
        // m̂ = v̂ = 1, so Δ = lr / (1 + ε)
        let expected = 2.0 - 0.01 / (1.0 + EPSILON);
        assert!((p.get("w").unwrap().data()[0] - expected).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_zero_decay_is_noop() {
        let mut p = scalar_store(2.0);
        let g = scalar_store(0.0);
        let mut st = AdamState::new(&p);
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut st, &LrSchedule::new(0.1, 0), 0.0).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data()[0], 2.0);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = scalar_store(2.0);
        let g = scalar_store(0.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &LrSchedule::new(0.1, 0), 0.01).unwrap();
        assert!((p.get("w").unwrap().data()[0] - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn warmup_schedule() {
        let s = LrSchedule::new(3e-5, 10);
        assert!((s.lr(3) - 3e-5 * 0.3).abs() < 1e-20);
        assert_eq!(s.lr(10), 3e-5);
        assert_eq!(s.lr(50), 3e-5);
        assert_eq!(LrSchedule::for_run(1.0, 10_000, 95).warmup_steps, 10);
        assert_eq!(LrSchedule::for_run(1.0, 5, 95).warmup_steps, 5);
    }

    #[test]
    fn layout_mismatch_is_error() {
        let mut p = scalar_store(1.0);
        let mut g = ParameterStore::new();
        g.insert("other", Tensor::scalar(1.0)).unwrap();
        let mut st = AdamState::new(&p);
        assert!(adam_step(&mut p, &g, &mut st, &LrSchedule::new(0.1, 0), 0.0).is_err());
    }
}
