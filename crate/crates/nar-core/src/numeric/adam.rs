//! Adam with bias correction.

use super::{Scalar, Tensor};
use crate::error::{NarError, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Result<Self> {
        if lr <= 0.0 {
            return Err(NarError::InvalidSpec(format!(
                "learning rate {lr} must be > 0"
            )));
        }
        Ok(AdamHyper {
            lr,
            ..Default::default()
        })
    }
}

/// First/second moment buffers for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.t
    }
}

/// One Adam update of `param` from `grad`, advancing the state.
pub fn adam_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &[T],
    state: &mut AdamState<T>,
    hp: &AdamHyper,
) -> Result<()> {
    if grad.len() != param.len() || state.m.len() != param.len() {
        return Err(NarError::ShapeMismatch {
            op: "adam_step",
            detail: format!(
                "param {} / grad {} / state {}",
                param.len(),
                grad.len(),
                state.m.len()
            ),
        });
    }
    if hp.lr <= 0.0 {
        return Err(NarError::InvalidSpec(format!(
            "learning rate {} must be > 0",
            hp.lr
        )));
    }
    state.t += 1;
    let b1 = T::from_f64(hp.beta1);
    let b2 = T::from_f64(hp.beta2);
    let one = T::one();
    let corr1 = T::from_f64(1.0 - hp.beta1.powi(state.t as i32));
    let corr2 = T::from_f64(1.0 - hp.beta2.powi(state.t as i32));
    let lr = T::from_f64(hp.lr);
    let eps = T::from_f64(hp.eps);
    for ((p, &g), (m, v)) in param
        .data_mut()
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / corr1;
        let v_hat = *v / corr2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
