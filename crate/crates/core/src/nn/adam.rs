//! Adam with bias-corrected moment estimates.

use serde::{Deserialize, Serialize};

use super::Parameters;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: Vec<Matrix>,
    pub second_moment: Vec<Matrix>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new<P: Parameters>(params: &P, config: AdamConfig) -> Self {
        let zeros: Vec<Matrix> = params
            .tensors()
            .iter()
            .map(|t| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            config,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
        }
    }

    /// Applies one update of `grads` to `params`.
    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) {
        self.step_count += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);

        let tensors = params.tensors_mut();
        let grad_tensors = grads.tensors();
        assert_eq!(tensors.len(), grad_tensors.len(), "parameter/gradient layout mismatch");
        assert_eq!(tensors.len(), self.first_moment.len(), "parameter/moment layout mismatch");

        for (((p, g), m), v) in tensors
            .into_iter()
            .zip(grad_tensors)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            assert_eq!(p.shape(), g.shape());
            for (((w, &dw), mi), vi) in p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * dw;
                *vi = beta2 * *vi + (1.0 - beta2) * dw * dw;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *w -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Dense;

    fn scalar_layer(w: f64) -> Dense {
        let mut d = Dense::zeros(1, 1);
        d.weight.set(0, 0, w);
        d
    }

    #[test]
    fn zero_gradient_leaves_everything_unchanged() {
        let mut p = scalar_layer(0.7);
        let g = Dense::zeros(1, 1);
        let mut st = AdamState::new(&p, AdamConfig::default());
        st.step(&mut p, &g);
        assert_eq!(p.weight.get(0, 0), 0.7);
        assert_eq!(st.first_moment[0].get(0, 0), 0.0);
        assert_eq!(st.second_moment[0].get(0, 0), 0.0);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_sign() {
        let mut p = scalar_layer(0.0);
        p.bias.set(0, 0, 0.0);
        let mut g = Dense::zeros(1, 1);
        g.weight.set(0, 0, 3.0);
        g.bias.set(0, 0, -0.01);
        let mut st = AdamState::new(&p, AdamConfig::default());
        st.step(&mut p, &g);
        // m̂ = g and v̂ = g², so the step is -lr·g/(|g| + eps)
        assert!((p.weight.get(0, 0) + 1e-4 * 3.0 / (3.0 + 1e-8)).abs() < 1e-18);
        assert!((p.bias.get(0, 0) - 1e-4 * 0.01 / (0.01 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn two_steps_follow_hand_recurrence() {
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut p = scalar_layer(1.0);
        let mut st = AdamState::new(&p, cfg);
        let mut g = Dense::zeros(1, 1);
        g.weight.set(0, 0, 0.5);
        st.step(&mut p, &g);
        st.step(&mut p, &g);

        // Scalar recurrence evaluated by hand.
        let (b1, b2, eps, lr, grad) = (0.9f64, 0.999f64, 1e-8, 0.1, 0.5);
        let mut w = 1.0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * grad;
            v = b2 * v + (1.0 - b2) * grad * grad;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((p.weight.get(0, 0) - w).abs() < 1e-15);
        // Constant gradients keep m̂/√v̂ at 1, so each step is ~lr.
        assert!((1.0 - p.weight.get(0, 0) - 0.2).abs() < 1e-6);
    }
}
