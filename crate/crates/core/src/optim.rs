//! Adam with bias correction, shared by the pixel optimiser and U-Net training.

use serde::{Deserialize, Serialize};

use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Applies one Adam update in place. `step` is the 1-based index of this
/// update, used for bias correction.
pub fn adam_update<T: Real>(
    params: &AdamParams,
    weights: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    lr: f64,
) {
    debug_assert!(step >= 1);
    let b1 = T::of(params.beta1);
    let b2 = T::of(params.beta2);
    let one = T::one();
    let c1 = one - T::of(params.beta1.powi(step.min(i32::MAX as u64) as i32));
    let c2 = one - T::of(params.beta2.powi(step.min(i32::MAX as u64) as i32));
    let lr = T::of(lr);
    let eps = T::of(params.eps);
    for (((w, &g), mi), vi) in weights.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mi = b1 * *mi + (one - b1) * g;
        *vi = b2 * *vi + (one - b2) * g * g;
        let m_hat = *mi / c1;
        let v_hat = *vi / c2;
        *w -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}
