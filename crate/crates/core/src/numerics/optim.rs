use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters of the adaptive-moment optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter first/second moment estimates with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    /// One accumulator pair per parameter tensor, sized by `lens`.
    pub fn new(config: AdamConfig, lens: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            first: lens.iter().map(|&n| vec![0.0; n]).collect(),
            second: lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::shape(
                "optimizer_step",
                format!("{} tensors in state", self.first.len()),
                format!("{} params / {} grads", params.len(), grads.len()),
            ));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[k].len() || g.len() != self.first[k].len() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("tensor {k}: {} in state", self.first[k].len()),
                    format!("{} params / {} grads", p.len(), g.len()),
                ));
            }
        }

        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let correct1 = 1.0 - beta1.powi(t);
        let correct2 = 1.0 - beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / correct1;
                let v_hat = v[j] / correct2;
                p[j] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut adam = Adam::new(AdamConfig::default(), &[3]);
        let mut p = vec![1.0, -2.0, 0.5];
        for _ in 0..5 {
            adam.step(&mut [&mut p], &[&[0.0; 3]]).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(adam.steps_taken(), 5);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut adam = Adam::new(AdamConfig::default(), &[2]);
        let mut p = vec![0.0, 0.0];
        for _ in 0..100 {
            adam.step(&mut [&mut p], &[&[0.3, -7.0]]).unwrap();
        }
        assert!(p[0] < 0.0 && p[1] > 0.0);
    }

    #[test]
    fn first_step_is_learning_rate_times_sign() {
        // m̂ = g, v̂ = g², so Δ = −η g / (|g| + ε).
        let config = AdamConfig {
            learning_rate: 0.01,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(config, &[3]);
        let g = [0.5, -2.0, 1e-3];
        let mut p = vec![0.0; 3];
        adam.step(&mut [&mut p], &[&g]).unwrap();
        for k in 0..3 {
            let expected = -0.01 * g[k] / (g[k].abs() + 1e-8);
            assert_abs_diff_eq!(p[k], expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut adam = Adam::new(AdamConfig::default(), &[2]);
        let mut p = vec![0.0; 3];
        assert!(matches!(adam.step(&mut [&mut p], &[&[0.0; 3]]), Err(Error::Shape { .. })));
        let mut q = vec![0.0; 2];
        assert!(matches!(adam.step(&mut [&mut q], &[&[0.0; 2], &[0.0; 2]]), Err(Error::Shape { .. })));
    }
}
