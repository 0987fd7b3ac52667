use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Parameters;
use crate::tensor::Matrix;

/// Affine layer `y = W x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        Self {
            weight: Matrix::uniform(output, input, bound, rng),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.bias.as_slice().to_vec();
        self.weight.matvec_acc(x, &mut y);
        y
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grads: &mut Dense) -> Vec<f64> {
        grads.weight.add_outer(dy, x);
        for (b, d) in grads.bias.as_mut_slice().iter_mut().zip(dy) {
            *b += d;
        }
        let mut dx = vec![0.0; x.len()];
        self.weight.matvec_t_acc(dy, &mut dx);
        dx
    }
}

impl Parameters for Dense {
    fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.weight, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn named_tensors(&self, prefix: &str) -> Vec<(String, &Matrix)> {
        vec![
            (format!("{prefix}.weight"), &self.weight),
            (format!("{prefix}.bias"), &self.bias),
        ]
    }
}
