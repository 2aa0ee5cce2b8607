//! Adam with bias correction.

use crate::autodiff::{Gradients, Mat, ParamSet};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state for one [`ParamSet`]. Slots without a gradient in a step
/// are left untouched, moments included.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: Vec<u64>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Mat> = params
            .tensors()
            .iter()
            .map(|t| Mat::zeros(t.dim()))
            .collect();
        Adam {
            config,
            m: zeros.clone(),
            v: zeros,
            t: vec![0; params.len()],
        }
    }

    /// Applies gradients from slots `offset .. offset + params.len()`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients, offset: usize) {
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let Some(g) = grads.get(offset + i) else {
                continue;
            };
            self.t[i] += 1;
            let t = self.t[i] as f64;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let c1 = 1.0 - beta1.powf(t);
            let c2 = 1.0 - beta2.powf(t);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}
