//! LSTM cells and two-layer stacks with exact backpropagation through time.
//!
//! Gate rows are laid out `[input, forget, output, candidate]`, each block
//! `hidden_size` rows tall.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::activation::sigmoid_scalar;
use super::dropout::DropoutMask;
use super::{Mode, Parameters};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmLayerParams {
    /// `4H × D`
    pub input_weights: Matrix,
    /// `4H × H`
    pub recurrent_weights: Matrix,
    /// `1 × 4H`
    pub bias: Matrix,
}

/// Everything one step needs for its backward pass.
#[derive(Debug, Clone)]
pub struct LstmStepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    input_gate: Vec<f64>,
    forget_gate: Vec<f64>,
    output_gate: Vec<f64>,
    candidate: Vec<f64>,
    tanh_c: Vec<f64>,
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    pub steps: Vec<LstmStepCache>,
}

impl LstmLayerParams {
    /// Uniform `±1/√fan_in` weights, zero biases except the forget gate at 1.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden_size: usize, rng: &mut R) -> Self {
        let in_bound = 1.0 / (input_dim.max(1) as f64).sqrt();
        let rec_bound = 1.0 / (hidden_size.max(1) as f64).sqrt();
        let mut bias = Matrix::zeros(1, 4 * hidden_size);
        for b in &mut bias.as_mut_slice()[hidden_size..2 * hidden_size] {
            *b = 1.0;
        }
        Self {
            input_weights: Matrix::uniform(4 * hidden_size, input_dim, in_bound, rng),
            recurrent_weights: Matrix::uniform(4 * hidden_size, hidden_size, rec_bound, rng),
            bias,
        }
    }

    pub fn zeros(input_dim: usize, hidden_size: usize) -> Self {
        Self {
            input_weights: Matrix::zeros(4 * hidden_size, input_dim),
            recurrent_weights: Matrix::zeros(4 * hidden_size, hidden_size),
            bias: Matrix::zeros(1, 4 * hidden_size),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.recurrent_weights.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.input_weights.cols()
    }

    fn check_dims(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<()> {
        let h = self.hidden_size();
        if x.len() != self.input_dim() || h_prev.len() != h || c_prev.len() != h {
            return Err(Error::Shape(format!(
                "lstm step expects x[{}], h[{h}], c[{h}]; got x[{}], h[{}], c[{}]",
                self.input_dim(),
                x.len(),
                h_prev.len(),
                c_prev.len()
            )));
        }
        Ok(())
    }

    /// One LSTM step returning `(h, c)`.
    pub fn step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let cache = self.step_cached(x, h_prev, c_prev)?;
        Ok((cache.h, cache.c))
    }

    pub fn step_cached(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<LstmStepCache> {
        self.check_dims(x, h_prev, c_prev)?;
        let hs = self.hidden_size();
        let mut z = self.bias.as_slice().to_vec();
        self.input_weights.matvec_acc(x, &mut z);
        self.recurrent_weights.matvec_acc(h_prev, &mut z);

        let input_gate: Vec<f64> = z[..hs].iter().map(|&v| sigmoid_scalar(v)).collect();
        let forget_gate: Vec<f64> = z[hs..2 * hs].iter().map(|&v| sigmoid_scalar(v)).collect();
        let output_gate: Vec<f64> = z[2 * hs..3 * hs].iter().map(|&v| sigmoid_scalar(v)).collect();
        let candidate: Vec<f64> = z[3 * hs..].iter().map(|v| v.tanh()).collect();

        let c: Vec<f64> = (0..hs)
            .map(|k| forget_gate[k] * c_prev[k] + input_gate[k] * candidate[k])
            .collect();
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let h: Vec<f64> = (0..hs).map(|k| output_gate[k] * tanh_c[k]).collect();

        Ok(LstmStepCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            input_gate,
            forget_gate,
            output_gate,
            candidate,
            tanh_c,
            h,
            c,
        })
    }

    /// Backward through one step. Returns `(dx, dh_prev, dc_prev)`.
    pub fn step_backward(
        &self,
        cache: &LstmStepCache,
        dh: &[f64],
        dc: &[f64],
        grads: &mut LstmLayerParams,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let hs = self.hidden_size();
        let mut dz = vec![0.0; 4 * hs];
        let mut dc_prev = vec![0.0; hs];
        for k in 0..hs {
            let (i, f, o, g) = (
                cache.input_gate[k],
                cache.forget_gate[k],
                cache.output_gate[k],
                cache.candidate[k],
            );
            let tc = cache.tanh_c[k];
            let d_o = dh[k] * tc;
            let dct = dc[k] + dh[k] * o * (1.0 - tc * tc);
            dz[k] = dct * g * i * (1.0 - i);
            dz[hs + k] = dct * cache.c_prev[k] * f * (1.0 - f);
            dz[2 * hs + k] = d_o * o * (1.0 - o);
            dz[3 * hs + k] = dct * i * (1.0 - g * g);
            dc_prev[k] = dct * f;
        }
        grads.input_weights.add_outer(&dz, &cache.x);
        grads.recurrent_weights.add_outer(&dz, &cache.h_prev);
        for (b, d) in grads.bias.as_mut_slice().iter_mut().zip(&dz) {
            *b += d;
        }
        let mut dx = vec![0.0; cache.x.len()];
        self.input_weights.matvec_t_acc(&dz, &mut dx);
        let mut dh_prev = vec![0.0; hs];
        self.recurrent_weights.matvec_t_acc(&dz, &mut dh_prev);
        (dx, dh_prev, dc_prev)
    }

    /// Runs the layer over `inputs` from zero initial state.
    pub fn forward_sequence(&self, inputs: &[Vec<f64>]) -> Result<LstmCache> {
        let hs = self.hidden_size();
        let mut h = vec![0.0; hs];
        let mut c = vec![0.0; hs];
        let mut steps = Vec::with_capacity(inputs.len());
        for x in inputs {
            let step = self.step_cached(x, &h, &c)?;
            h.clone_from(&step.h);
            c.clone_from(&step.c);
            steps.push(step);
        }
        Ok(LstmCache { steps })
    }

    /// BPTT given `dL/dh_t` for every step. Returns `dL/dx_t` for every step.
    pub fn backward_sequence(
        &self,
        cache: &LstmCache,
        dh_out: &[Vec<f64>],
        grads: &mut LstmLayerParams,
    ) -> Vec<Vec<f64>> {
        let hs = self.hidden_size();
        let mut dh_next = vec![0.0; hs];
        let mut dc_next = vec![0.0; hs];
        let mut dxs = vec![Vec::new(); cache.steps.len()];
        for t in (0..cache.steps.len()).rev() {
            let dh: Vec<f64> = dh_out[t].iter().zip(&dh_next).map(|(a, b)| a + b).collect();
            let (dx, dh_prev, dc_prev) = self.step_backward(&cache.steps[t], &dh, &dc_next, grads);
            dxs[t] = dx;
            dh_next = dh_prev;
            dc_next = dc_prev;
        }
        dxs
    }
}

impl Parameters for LstmLayerParams {
    fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.input_weights, &self.recurrent_weights, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.input_weights,
            &mut self.recurrent_weights,
            &mut self.bias,
        ]
    }

    fn named_tensors(&self, prefix: &str) -> Vec<(String, &Matrix)> {
        vec![
            (format!("{prefix}.input_weights"), &self.input_weights),
            (format!("{prefix}.recurrent_weights"), &self.recurrent_weights),
            (format!("{prefix}.bias"), &self.bias),
        ]
    }
}

/// LSTM layers stacked bottom-up, with inverted dropout on the output of
/// every layer except the top one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedLstm {
    pub layers: Vec<LstmLayerParams>,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct StackedLstmCache {
    layers: Vec<LstmCache>,
    masks: Vec<Vec<DropoutMask>>,
}

impl StackedLstmCache {
    /// Top-layer hidden state at every step.
    pub fn top_hidden(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .last()
            .into_iter()
            .flat_map(|l| l.steps.iter().map(|s| s.h.as_slice()))
    }
}

impl StackedLstm {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden_size: usize,
        num_layers: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|l| {
                let d = if l == 0 { input_dim } else { hidden_size };
                LstmLayerParams::new(d, hidden_size, rng)
            })
            .collect();
        Self { layers, dropout }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LstmLayerParams::zeros(l.input_dim(), l.hidden_size()))
                .collect(),
            dropout: self.dropout,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn hidden_size(&self) -> usize {
        self.layers.last().map_or(0, LstmLayerParams::hidden_size)
    }

    /// Runs the stack over an `ℓ × D` clip from zero states and returns the
    /// top layer's final hidden state together with the backprop cache.
    pub fn forward(&self, clip: &Matrix, mode: &mut Mode<'_>) -> Result<(Vec<f64>, StackedLstmCache)> {
        if clip.rows() == 0 {
            return Err(Error::Shape("empty clip".into()));
        }
        if clip.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "clip has {} features per frame, stack expects {}",
                clip.cols(),
                self.input_dim()
            )));
        }
        let mut inputs: Vec<Vec<f64>> = (0..clip.rows()).map(|t| clip.row(t).to_vec()).collect();
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let cache = layer.forward_sequence(&inputs)?;
            let outputs: Vec<Vec<f64>> = cache.steps.iter().map(|s| s.h.clone()).collect();
            layers.push(cache);
            if l + 1 < self.layers.len() {
                let step_masks: Vec<DropoutMask> = outputs
                    .iter()
                    .map(|h| match mode {
                        Mode::Train(rng) if self.dropout > 0.0 => {
                            DropoutMask::sample(h.len(), self.dropout, &mut **rng)
                        }
                        _ => DropoutMask::identity(h.len()),
                    })
                    .collect();
                inputs = outputs
                    .iter()
                    .zip(&step_masks)
                    .map(|(h, m)| m.apply(h))
                    .collect();
                masks.push(step_masks);
            } else {
                inputs = outputs;
            }
        }
        let last = inputs.pop().expect("clip has at least one frame");
        Ok((last, StackedLstmCache { layers, masks }))
    }

    /// Backward from `dL/dh` at the top layer's final step.
    pub fn backward(&self, cache: &StackedLstmCache, dh_final: &[f64], grads: &mut StackedLstm) {
        let steps = cache.layers[0].steps.len();
        let hs = self.hidden_size();
        let mut dh_out = vec![vec![0.0; hs]; steps];
        dh_out[steps - 1] = dh_final.to_vec();
        self.backward_all(cache, dh_out, grads);
    }

    /// Backward from `dL/dh_t` for every top-layer step.
    pub fn backward_all(&self, cache: &StackedLstmCache, mut dh_out: Vec<Vec<f64>>, grads: &mut StackedLstm) {
        for l in (0..self.layers.len()).rev() {
            let dx = self.layers[l].backward_sequence(&cache.layers[l], &dh_out, &mut grads.layers[l]);
            if l > 0 {
                dh_out = dx
                    .iter()
                    .zip(&cache.masks[l - 1])
                    .map(|(d, m)| m.backward(d))
                    .collect();
            }
        }
    }
}

impl Parameters for StackedLstm {
    fn tensors(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }

    fn named_tensors(&self, prefix: &str) -> Vec<(String, &Matrix)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.named_tensors(&format!("{prefix}.layer{i}")))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_clip(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::uniform(rows, cols, 1.0, rng)
    }

    /// `L = Σ w_k h_k`, a generic scalar readout.
    fn readout(h: &[f64], w: &[f64]) -> f64 {
        h.iter().zip(w).map(|(a, b)| a * b).sum()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / na.max(nb).max(1e-12)
    }

    #[test]
    fn zero_params_give_zero_state() {
        let p = LstmLayerParams::zeros(3, 4);
        let (h, c) = p.step(&[0.3, -1.0, 2.0], &[0.0; 4], &[0.0; 4]).unwrap();
        assert_eq!(h, vec![0.0; 4]);
        assert_eq!(c, vec![0.0; 4]);
    }

    #[test]
    fn dimension_mismatch_is_a_shape_error() {
        let p = LstmLayerParams::zeros(3, 4);
        assert!(matches!(p.step(&[0.0; 2], &[0.0; 4], &[0.0; 4]), Err(Error::Shape(_))));
        assert!(matches!(p.step(&[0.0; 3], &[0.0; 3], &[0.0; 4]), Err(Error::Shape(_))));
    }

    #[test]
    fn hidden_entries_stay_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = LstmLayerParams::new(4, 6, &mut rng);
        for t in p.tensors_mut() {
            t.scale(25.0);
        }
        let mut h = vec![0.0; 6];
        let mut c = vec![0.0; 6];
        for _ in 0..20 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            (h, c) = p.step(&x, &h, &c).unwrap();
            assert!(h.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn single_step_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = LstmLayerParams::new(4, 3, &mut rng);
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h0: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
        let c0: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
        let w: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();

        let cache = p.step_cached(&x, &h0, &c0).unwrap();
        let mut grads = LstmLayerParams::zeros(4, 3);
        p.step_backward(&cache, &w, &[0.0; 3], &mut grads);

        let eps = 1e-5;
        for (ti, g) in grads.tensors().iter().enumerate() {
            let mut numeric = Vec::with_capacity(g.len());
            for k in 0..g.len() {
                let mut plus = p.clone();
                plus.tensors_mut()[ti].as_mut_slice()[k] += eps;
                let mut minus = p.clone();
                minus.tensors_mut()[ti].as_mut_slice()[k] -= eps;
                let fp = readout(&plus.step(&x, &h0, &c0).unwrap().0, &w);
                let fm = readout(&minus.step(&x, &h0, &c0).unwrap().0, &w);
                numeric.push((fp - fm) / (2.0 * eps));
            }
            let e = rel_err(g.as_slice(), &numeric);
            assert!(e < 1e-4, "tensor {ti}: relative error {e}");
        }
    }

    #[test]
    fn stack_bptt_matches_finite_differences_with_dropout_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let stack = StackedLstm::new(4, 3, 2, 0.2, &mut rng);
        let clip = random_clip(5, 4, &mut rng);
        let w: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();

        let eval = |s: &StackedLstm| {
            let mut r = ChaCha8Rng::seed_from_u64(99);
            let (h, _) = s.forward(&clip, &mut Mode::Train(&mut r)).unwrap();
            readout(&h, &w)
        };

        let mut r = ChaCha8Rng::seed_from_u64(99);
        let (_, cache) = stack.forward(&clip, &mut Mode::Train(&mut r)).unwrap();
        let mut grads = stack.zeros_like();
        stack.backward(&cache, &w, &mut grads);

        let eps = 1e-5;
        for (ti, g) in grads.tensors().iter().enumerate() {
            let mut numeric = Vec::with_capacity(g.len());
            for k in 0..g.len() {
                let mut plus = stack.clone();
                plus.tensors_mut()[ti].as_mut_slice()[k] += eps;
                let mut minus = stack.clone();
                minus.tensors_mut()[ti].as_mut_slice()[k] -= eps;
                numeric.push((eval(&plus) - eval(&minus)) / (2.0 * eps));
            }
            let e = rel_err(g.as_slice(), &numeric);
            assert!(e < 1e-4, "tensor {ti}: relative error {e}");
        }
    }

    #[test]
    fn zero_dropout_train_equals_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stack = StackedLstm::new(6, 5, 2, 0.0, &mut rng);
        let clip = random_clip(7, 6, &mut rng);
        let (a, _) = stack.forward(&clip, &mut Mode::Train(&mut rng)).unwrap();
        let (b, _) = stack.forward(&clip, &mut Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn one_frame_clip_is_one_step_per_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let stack = StackedLstm::new(3, 4, 2, 0.2, &mut rng);
        let clip = random_clip(1, 3, &mut rng);
        let (top, _) = stack.forward(&clip, &mut Mode::Eval).unwrap();
        let (h1, _) = stack.layers[0].step(clip.row(0), &[0.0; 4], &[0.0; 4]).unwrap();
        let (h2, _) = stack.layers[1].step(&h1, &[0.0; 4], &[0.0; 4]).unwrap();
        assert_eq!(top, h2);
    }

    #[test]
    fn empty_clip_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let stack = StackedLstm::new(3, 4, 2, 0.2, &mut rng);
        assert!(stack.forward(&Matrix::zeros(0, 3), &mut Mode::Eval).is_err());
    }
}
