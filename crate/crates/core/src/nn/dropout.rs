use rand::Rng;

/// Inverted dropout mask: kept units are scaled by `1 / (1 - rate)` so that
/// evaluation mode is the exact identity.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    scale: Vec<f64>,
}

impl DropoutMask {
    pub fn sample<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Self {
        debug_assert!((0.0..1.0).contains(&rate));
        if rate == 0.0 {
            return Self::identity(len);
        }
        let keep = 1.0 / (1.0 - rate);
        let scale = (0..len)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        Self { scale }
    }

    pub fn identity(len: usize) -> Self {
        Self {
            scale: vec![1.0; len],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.scale).map(|(a, s)| a * s).collect()
    }

    /// The mask is linear, so the backward pass is the same product.
    pub fn backward(&self, dy: &[f64]) -> Vec<f64> {
        self.apply(dy)
    }
}
