//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::tensor::{expect_same_shape, ParamBlock, Real, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    /// Zeroed moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &[ParamBlock<T>]) -> Self {
        let zeros: Vec<_> = params.iter().map(|p| Tensor::zeros_like(&p.value)).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.second
    }
}

/// One Adam update of every block in `params` using `grads` (same order).
///
/// All gradients are checked for finiteness before anything is mutated.
pub fn adam_step<T: Real>(params: &mut [ParamBlock<T>], grads: &[Tensor<T>], state: &mut AdamState<T>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(TensorError::ShapeMismatch {
            op: "adam_step",
            axis: "parameter block count".into(),
            expected: params.len(),
            actual: grads.len().min(state.first.len()),
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first) {
        expect_same_shape("adam_step", p.value.shape(), g.shape())?;
        expect_same_shape("adam_step", p.value.shape(), m.shape())?;
        if !g.is_finite() {
            return Err(TensorError::NonFiniteGradient { block: p.name.clone() });
        }
    }

    state.step += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step as i32;
    let correction1 = 1.0 - beta1.powi(t);
    let correction2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
    let (one_m_b1, one_m_b2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
    let (c1, c2) = (T::from_f64(correction1), T::from_f64(correction2));
    let (lr, eps) = (T::from_f64(learning_rate), T::from_f64(epsilon));

    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.first).zip(&mut state.second) {
        let values = p.value.data_mut();
        for (((w, &gi), mi), vi) in values.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = b1 * *mi + one_m_b1 * gi;
            *vi = b2 * *vi + one_m_b2 * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
