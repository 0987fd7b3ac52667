//! Minimal dense numerical kernel: activations, affine layers, stacked LSTMs
//! with exact backpropagation through time, inverted dropout and Adam.

pub mod activation;
pub mod adam;
pub mod dense;
pub mod dropout;
pub mod lstm;

pub use activation::{sigmoid, sigmoid_scalar, softmax};
pub use adam::{AdamConfig, AdamState};
pub use dense::Dense;
pub use dropout::DropoutMask;
pub use lstm::{LstmCache, LstmLayerParams, LstmStepCache, StackedLstm, StackedLstmCache};

use crate::tensor::Matrix;

/// Anything holding trainable tensors in a fixed traversal order.
///
/// Gradients are stored in a value of the same type, so `tensors()` of the
/// parameters and of the gradients line up one-to-one.
pub trait Parameters {
    fn tensors(&self) -> Vec<&Matrix>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;
    /// `(name, tensor)` pairs, names prefixed with `prefix`.
    fn named_tensors(&self, prefix: &str) -> Vec<(String, &Matrix)>;

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    /// Element-wise `self += other`.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.axpy(1.0, b);
        }
    }

    fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.scale(alpha);
        }
    }

    fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|t| t.sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<P: Parameters>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Forward-pass mode. Training carries the RNG that draws dropout masks.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn rand::RngCore),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}
