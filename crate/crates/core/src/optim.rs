//! Adam with bias correction.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn for_store(store: &ParamStore) -> Self {
        let zeros = || store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

impl Adam {
    /// Applies one update from the gradients accumulated in `store`.
    /// Tensors that never received a gradient are treated as zero-gradient.
    pub fn step(&self, store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
        if !store.is_trainable() {
            return Err(Error::Usage(alloc::format!("group `{}` is frozen", store.group())));
        }
        if state.m.len() != store.len() {
            return Err(Error::Validation(
                "optimizer state does not match parameter group".into(),
            ));
        }
        state.step += 1;
        let t = state.step as f64;
        let bc1 = 1.0 - libm::pow(self.beta1, t);
        let bc2 = 1.0 - libm::pow(self.beta2, t);
        for ((p, m), v) in store.tensors_mut().iter_mut().zip(&mut state.m).zip(&mut state.v) {
            let Some(g) = p.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            for (((w, mi), vi), gi) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(&g) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *w -= self.lr * mh / (libm::sqrt(vh) + self.eps);
            }
        }
        Ok(())
    }
}
