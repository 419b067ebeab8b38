//! Adam over a flat parameter vector.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One bias-corrected update of `params` (split across `chunks` that are
    /// laid end to end in the moment vectors).
    pub fn step(&mut self, cfg: &OptimizerConfig, chunks: &mut [&mut [f64]], grads: &[&[f64]]) {
        self.t += 1;
        let b1t = 1.0 - cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - cfg.beta2.powi(self.t as i32);
        let mut offset = 0;
        for (params, grad) in chunks.iter_mut().zip(grads) {
            debug_assert_eq!(params.len(), grad.len());
            let m = &mut self.m[offset..offset + params.len()];
            let v = &mut self.v[offset..offset + params.len()];
            for (((p, g), m), v) in params.iter_mut().zip(grad.iter()).zip(m).zip(v) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *p -= cfg.lr * (*m / b1t) / ((*v / b2t).sqrt() + cfg.eps);
            }
            offset += params.len();
        }
    }
}
