//! AdamW with decoupled weight decay and per-parameter learning rates.

use serde::{Deserialize, Serialize};

use crate::params::{Param, ParamStore};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentState {
    pub steps: u64,
    pub first: Matrix,
    pub second: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub moments: Vec<MomentState>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let moments = store
            .iter()
            .map(|(_, p)| {
                let (r, c) = p.value.shape();
                MomentState {
                    steps: 0,
                    first: Matrix::zeros(r, c),
                    second: Matrix::zeros(r, c),
                }
            })
            .collect();
        Self { config, moments }
    }

    /// One update. Parameters whose gradient is `None` or whose learning rate
    /// is zero are left untouched, weight decay included.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Matrix>],
        learning_rate: impl Fn(&Param) -> f64,
    ) {
        assert_eq!(grads.len(), self.moments.len(), "gradient count");
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let ids: Vec<_> = store.ids().collect();
        for (id, (grad, state)) in ids.into_iter().zip(grads.iter().zip(&mut self.moments)) {
            let Some(grad) = grad else { continue };
            let lr = learning_rate(store.param(id));
            if lr == 0.0 {
                continue;
            }
            state.steps += 1;
            let t = state.steps as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let value = store.get_mut(id);
            let decay = 1.0 - lr * weight_decay;
            let it = value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(state.first.data_mut().iter_mut().zip(state.second.data_mut()));
            for ((p, &g), (m, v)) in it {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Option<Matrix>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let f = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= f);
        }
    }
    norm
}
