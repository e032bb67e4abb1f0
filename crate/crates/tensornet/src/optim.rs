//! Adam with L2 weight decay folded into the gradient.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::params::{ParamId, ParamStore, Parameter};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state shared by all parameters; per-parameter moments live on
/// [`crate::Parameter`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0 }
    }

    /// One update of every `(id, grad)` pair:
    /// `g ← g + wd·θ; m ← β1 m + (1-β1) g; v ← β2 v + (1-β2) g²;
    ///  θ ← θ − lr · m̂ / (sqrt(v̂) + eps)` with bias-corrected `m̂`, `v̂`.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[(ParamId, Tensor)],
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        for (id, g) in grads {
            if store.get(*id).value.shape() != g.shape() {
                return shape_err(
                    "Adam::step",
                    format!(
                        "gradient {:?} for {} has shape {:?}",
                        g.shape(),
                        store.name(*id),
                        store.get(*id).value.shape()
                    ),
                );
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in grads {
            let p = store.get_mut(*id);
            let Parameter {
                value,
                first_moment,
                second_moment,
            } = p;
            for (((theta, m), v), &gi) in value
                .data_mut()
                .iter_mut()
                .zip(first_moment.iter_mut())
                .zip(second_moment.iter_mut())
                .zip(g.data())
            {
                let gi = gi + weight_decay * *theta;
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
