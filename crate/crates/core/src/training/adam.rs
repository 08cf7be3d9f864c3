use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators laid out like the trainable tensors of a [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub hyper: AdamHyper,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParams, hyper: AdamHyper) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors(false)
            .iter()
            .map(|(_, t)| vec![0.0; t.len()])
            .collect();
        Adam {
            hyper,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update; parameters are untouched if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<()> {
        let g = grads.tensors(false);
        if g.len() != self.m.len() || g.iter().zip(&self.m).any(|((_, t), m)| t.len() != m.len()) {
            return Err(Error::Shape("gradient layout differs from optimizer state".into()));
        }
        if let Some((name, _)) = g.iter().find(|(_, t)| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("gradient of {name} at step {}", self.step + 1)));
        }
        let AdamHyper { lr, beta1, beta2, eps } = self.hyper;
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let mut p = params.tensors_mut(false);
        if p.len() != g.len() {
            return Err(Error::Shape("parameter layout differs from gradients".into()));
        }
        for (((_, w), (_, gt)), (m, v)) in p.iter_mut().zip(&g).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..w.len() {
                let gi = gt[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
