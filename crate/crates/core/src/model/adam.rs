//! Adam optimizer over a flat parameter vector.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, invalid_param, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl Adam {
    pub fn new(num_params: usize, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn num_params(&self) -> usize {
        self.m.len()
    }

    /// One bias-corrected update `θ -= lr · m̂ / (√v̂ + ε)`.
    pub fn update(&mut self, params: &mut [f32], grads: &[f32], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(invalid_input("optimizer and parameter sizes differ"));
        }
        if !(lr >= 0.0) {
            return Err(invalid_param("learning rate must be non-negative"));
        }
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.cfg.eps * c2.sqrt()) as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            params[i] -= step * self.m[i] / (self.v[i].sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut adam = Adam::new(2, AdamConfig::default());
        let mut p = vec![1.0f32, -1.0];
        adam.update(&mut p, &[0.5, -3.0], 0.01).unwrap();
        assert!((p[0] - 0.99).abs() < 1e-5);
        assert!((p[1] + 0.99).abs() < 1e-5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut adam = Adam::new(1, AdamConfig::default());
        let mut p = vec![5.0f32];
        for _ in 0..2000 {
            let g = 2.0 * (p[0] - 2.0);
            adam.update(&mut p, &[g], 0.05).unwrap();
        }
        assert!((p[0] - 2.0).abs() < 1e-2);
    }

    #[test]
    fn rejects_size_mismatch() {
        let mut adam = Adam::new(3, AdamConfig::default());
        assert!(adam.update(&mut [0.0; 2], &[0.0; 2], 0.1).is_err());
    }
}
