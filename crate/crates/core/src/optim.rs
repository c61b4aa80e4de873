//! Adam with bias correction and coupled L2 regularization.

use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub first: Vec<Matrix<T>>,
    pub second: Vec<Matrix<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        Self {
            step: 0,
            first: params.zeros_like(),
            second: params.zeros_like(),
        }
    }
}

/// One Adam update. `l2` adds `l2 * theta` to the gradient of every
/// parameter flagged for decay.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &[Matrix<T>],
    state: &mut AdamState<T>,
    lr: f64,
    l2: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.first.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients and {} moment buffers for {} parameters",
            grads.len(),
            state.first.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
    let one = T::one();
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    let (lr, l2, eps) = (T::lit(lr), T::lit(l2), T::lit(EPSILON));

    for (((id, p), g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first.iter_mut().zip(state.second.iter_mut()))
    {
        if p.value.shape() != g.shape() {
            return Err(Error::shape_mismatch(
                &format!("adam step for parameter {}", id.index()),
                p.value.shape(),
                g.shape(),
            ));
        }
        let decay = if p.decay { l2 } else { T::zero() };
        let values = p.value.data_mut();
        for i in 0..values.len() {
            let gi = g.data()[i] + decay * values[i];
            let mi = b1 * m.data()[i] + (one - b1) * gi;
            let vi = b2 * v.data()[i] + (one - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / c1;
            let v_hat = vi / c2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
