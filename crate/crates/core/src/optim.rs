//! Adam over named parameters.

use std::collections::BTreeMap;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates per parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Array2<f64>>,
    pub v: BTreeMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Advance the shared step counter; call once before the updates of a step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Apply one bias-corrected update to `param`.
    pub fn update(&mut self, name: &str, param: &mut Array2<f64>, grad: &Array2<f64>) {
        assert!(self.step > 0, "begin_step must precede update");
        let c = self.config;
        let m = self.m.entry(name.to_string()).or_insert_with(|| Array2::zeros(param.dim()));
        let v = self.v.entry(name.to_string()).or_insert_with(|| Array2::zeros(param.dim()));
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        Zip::from(param).and(m).and(v).and(grad).for_each(|p, m, v, &g| {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            *p -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
        });
    }
}
