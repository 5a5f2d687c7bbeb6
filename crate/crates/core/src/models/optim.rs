use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ModelBundle;
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
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

/// Adam with bias correction. Moment buffers are keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    steps: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Consumes the gradients accumulated in `bundle` and clears them.
    /// `lr` maps a parameter name to its learning rate.
    pub fn step(&mut self, bundle: &mut ModelBundle, lr: impl Fn(&str) -> f64) -> Result<()> {
        let params = bundle.params_mut()?;
        self.steps += 1;
        for (name, p) in params.iter_mut() {
            self.update(name, p, lr(name));
        }
        Ok(())
    }

    /// Updates a free-standing tensor (e.g. balancer parameters); call
    /// [`Adam::tick`] once per optimization step before this.
    pub fn step_tensor(&mut self, name: &str, t: &mut Tensor, lr: f64) {
        self.update(name, t, lr);
    }

    pub fn tick(&mut self) {
        self.steps += 1;
    }

    fn update(&mut self, name: &str, p: &mut Tensor, lr: f64) {
        let Some(g) = p.grad().map(<[f64]>::to_vec) else {
            return;
        };
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
        let t = self.steps.max(1) as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let values = p.values_mut();
        for i in 0..g.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            values[i] -= lr * mh / (vh.sqrt() + eps);
        }
        p.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let mut t = Tensor::new(vec![2], vec![1.0, 1.0], true).unwrap();
        t.accumulate_grad(&[0.5, -3.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.tick();
        adam.step_tensor("t", &mut t, 0.1);
        assert!((t.values()[0] - 0.9).abs() < 1e-6);
        assert!((t.values()[1] - 1.1).abs() < 1e-6);
        assert_eq!(t.grad(), Some(&[0.0, 0.0][..]));
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut t = Tensor::new(vec![1], vec![5.0], true).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..2000 {
            let g = 2.0 * (t.values()[0] - 2.0);
            t.accumulate_grad(&[g]).unwrap();
            adam.tick();
            adam.step_tensor("t", &mut t, 0.05);
        }
        assert!((t.values()[0] - 2.0).abs() < 1e-3);
    }
}
