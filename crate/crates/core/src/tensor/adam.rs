use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Per-parameter moment estimates for Adam.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore<f32>) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Gradients are checked for NaN/Inf before any
    /// parameter is touched.
    pub fn step(
        &mut self,
        params: &mut ParamStore<f32>,
        grads: &[Tensor<f32>],
    ) -> Result<(), TensorError> {
        if grads.len() != params.len() {
            return Err(super::shape_err(
                "adam_step",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() {
                return Err(super::shape_err(
                    "adam_step",
                    format!(
                        "gradient {:?} for parameter `{}` of shape {:?}",
                        g.shape(),
                        params.name(id),
                        params.get(id).shape()
                    ),
                ));
            }
            if !g.is_finite() {
                return Err(TensorError::NonFiniteGradient(params.name(id).to_string()));
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let g = grads[i].data();
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            let p = params.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g[j] as f64;
                let mj = beta1 * m[j] as f64 + (1.0 - beta1) * gj;
                let vj = beta2 * v[j] as f64 + (1.0 - beta2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = lr * (mj / c1) / ((vj / c2).sqrt() + eps);
                p[j] = (p[j] as f64 - update) as f32;
            }
        }
        Ok(())
    }
}
