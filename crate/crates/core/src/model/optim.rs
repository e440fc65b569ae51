use serde::{Deserialize, Serialize};

use super::{Gradients, TraitModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. Frozen tensors are never touched.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, model: &TraitModel) -> Self {
        let sizes: Vec<usize> = model.parameters().iter().map(|p| p.1.len()).collect();
        AdamW {
            config,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, model: &mut TraitModel, grads: &Gradients) {
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        let params = model.parameters_mut();
        debug_assert_eq!(params.len(), grads.tensors.len());
        for (((param, (_, grad)), m), v) in params
            .into_iter()
            .zip(&grads.tensors)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            if !param.trainable {
                continue;
            }
            for (((p, &g), m), v) in param.values.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                *p -= c.lr * c.weight_decay * *p;
                *p -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            }
        }
    }
}
