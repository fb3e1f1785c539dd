use crate::error::{Result, TensorError};
use crate::params::{ParamGrads, ParamStore};
use crate::tensor::Tensor;

pub const ADAMW_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, weight_decay: 0.01 }
    }
}

/// First and second moment estimates, aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

/// AdamW with decoupled weight decay.
///
/// The decay shrinks each trainable parameter by `lr · weight_decay · p`
/// regardless of its gradient; frozen parameters are left untouched.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: OptimizerState,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        AdamW { config, state: OptimizerState { step: 0, first: zeros.clone(), second: zeros } }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One update. A non-finite gradient rejects the whole step before any
    /// parameter changes.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        if grads.len() != store.len() || self.state.first.len() != store.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw_step",
                lhs: vec![store.len()],
                rhs: vec![grads.len()],
            });
        }
        for id in store.ids() {
            if store.is_trainable(id) && !grads.get(id).is_finite() {
                return Err(TensorError::NonFiniteGradient(store.name(id).to_string()));
            }
        }
        self.state.step += 1;
        let AdamWConfig { lr, beta1, beta2, weight_decay } = self.config;
        let t = self.state.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let i = id.index();
            let g = grads.get(id).data();
            let m = self.state.first[i].data_mut();
            let v = self.state.second[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * weight_decay * p[j];
                p[j] -= lr * mhat / (vhat.sqrt() + ADAMW_EPS);
            }
        }
        Ok(())
    }
}
