//! Bias-corrected Adam with per-parameter step counts.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Moments of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot<T: Scalar = f32> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    /// Updates applied so far.
    pub step: u64,
}

impl<T: Scalar> AdamSlot<T> {
    pub fn new(shape: &[usize]) -> Self {
        AdamSlot {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step: 0,
        }
    }
}

/// Optimizer state keyed by parameter name. A parameter gets a slot on its
/// first update, so latents of raters that have not been seen yet keep no
/// state and their bias correction starts when they first appear.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub slots: BTreeMap<String, AdamSlot<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            slots: BTreeMap::new(),
        }
    }

    /// Applies one update to `param` under `name`.
    pub fn update(
        &mut self,
        name: &str,
        param: &mut Tensor<T>,
        grad: &Tensor<T>,
        lr: f64,
    ) -> Result<()> {
        let slot = self
            .slots
            .entry(name.to_string())
            .or_insert_with(|| AdamSlot::new(param.shape()));
        adam_update(name, param, grad, slot, lr)
    }
}

/// `param -= lr * m_hat / (sqrt(v_hat) + eps)` after updating the moments.
/// Rejects non-finite gradients before touching any state.
pub fn adam_update<T: Scalar>(
    name: &str,
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    slot: &mut AdamSlot<T>,
    lr: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || slot.m.shape() != param.shape() {
        return Err(Error::shape(
            "adam_update",
            format!(
                "{name}: parameter {:?}, gradient {:?}, state {:?}",
                param.shape(),
                grad.shape(),
                slot.m.shape()
            ),
        ));
    }
    if let Some(i) = grad.data().iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of {name} (entry {i})")));
    }
    slot.step += 1;
    let t = slot.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
    for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
        let g = g.as_f64();
        let mi = BETA1 * m[i].as_f64() + (1.0 - BETA1) * g;
        let vi = BETA2 * v[i].as_f64() + (1.0 - BETA2) * g * g;
        m[i] = T::from_f64(mi);
        v[i] = T::from_f64(vi);
        let step = lr * (mi / c1) / ((vi / c2).sqrt() + EPS);
        *p = T::from_f64(p.as_f64() - step);
    }
    Ok(())
}
