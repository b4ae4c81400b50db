use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Moment estimates; `step` counts completed updates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Adam { config, state: AdamState { step: 0, m: vec![0.0; num_params], v: vec![0.0; num_params] } }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) -> Result<()> {
        ensure!(
            params.len() == self.state.m.len() && grads.len() == params.len(),
            "optimizer holds {} moments, got {} params and {} grads",
            self.state.m.len(),
            params.len(),
            grads.len()
        );
        let c = &self.config;
        self.state.step += 1;
        let t = self.state.step as f64;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        let step = (c.learning_rate * bc2.sqrt() / bc1) as f32;
        let eps = (c.epsilon * bc2.sqrt()) as f32;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.state.m).zip(&mut self.state.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step * *m / (v.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut adam = Adam::new(AdamConfig::with_learning_rate(0.1), 2);
        let mut p = vec![1.0f32, -1.0];
        adam.step(&mut p, &[3.0, -0.5]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut adam = Adam::new(AdamConfig::with_learning_rate(0.05), 1);
        let mut p = vec![4.0f32];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.5)];
            adam.step(&mut p, &g).unwrap();
        }
        assert!((p[0] - 1.5).abs() < 1e-2);
    }

    #[test]
    fn length_mismatch() {
        let mut adam = Adam::new(AdamConfig::with_learning_rate(0.1), 2);
        assert!(adam.step(&mut [0.0], &[1.0]).is_err());
    }
}
