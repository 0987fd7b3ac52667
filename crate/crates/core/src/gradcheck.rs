//! Central finite-difference verification of analytic gradients.
//!
//! The relative error of a tensor is `‖a - n‖ / max(‖a‖, ‖n‖)`, with `a` the
//! analytic and `n` the numeric gradient; a report keeps the maximum over
//! tensors and trials.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::losses::{self, ProgressBin, ProgressLossKind};
use crate::model::{CombinedModelParams, ForecastSample, ModelConfig};
use crate::nn::{Mode, Parameters, StackedLstm};
use crate::tensor::Matrix;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Norms below this are treated as exact zeros when forming ratios.
const NORM_FLOOR: f64 = 1e-10;

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < NORM_FLOOR {
        diff
    } else {
        diff / denom
    }
}

/// Central differences of `loss` with respect to every scalar of `params`.
pub fn numeric_gradient<P, F>(params: &P, loss: F, step: f64) -> Vec<Vec<f64>>
where
    P: Parameters + Clone,
    F: Fn(&P) -> f64,
{
    let mut probe = params.clone();
    let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut out = Vec::with_capacity(shapes.len());
    for (ti, &len) in shapes.iter().enumerate() {
        let mut g = Vec::with_capacity(len);
        for k in 0..len {
            let orig = probe.tensors()[ti].as_slice()[k];
            probe.tensors_mut()[ti].as_mut_slice()[k] = orig + step;
            let plus = loss(&probe);
            probe.tensors_mut()[ti].as_mut_slice()[k] = orig - step;
            let minus = loss(&probe);
            probe.tensors_mut()[ti].as_mut_slice()[k] = orig;
            g.push((plus - minus) / (2.0 * step));
        }
        out.push(g);
    }
    out
}

/// Maximum per-tensor relative error between `analytic` and central
/// differences of `loss` around `params`.
pub fn max_relative_error<P, F>(params: &P, analytic: &P, loss: F, step: f64) -> f64
where
    P: Parameters + Clone,
    F: Fn(&P) -> f64,
{
    numeric_gradient(params, loss, step)
        .iter()
        .zip(analytic.tensors())
        .map(|(n, a)| relative_error(a.as_slice(), n))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Component {
    /// Exact cumulative probability loss gradient.
    Losses,
    /// The single-term gradient; expected to fail.
    TruncatedCpLoss,
    /// Softmax cross-entropy gradient.
    CrossEntropy,
    /// Two-layer stacked LSTM with dropout.
    Streams,
    /// Full fused model, every loss term.
    Combined,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Losses,
        Component::TruncatedCpLoss,
        Component::CrossEntropy,
        Component::Streams,
        Component::Combined,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Component::Losses => "losses",
            Component::TruncatedCpLoss => "cploss-truncated",
            Component::CrossEntropy => "cross-entropy",
            Component::Streams => "streams",
            Component::Combined => "combined",
        }
    }

    pub fn default_tolerance(&self) -> f64 {
        match self {
            Component::Losses | Component::TruncatedCpLoss => 1e-5,
            Component::CrossEntropy => 1e-6,
            Component::Streams | Component::Combined => 1e-4,
        }
    }

    /// Whether a correct implementation is expected to pass.
    pub fn expected_to_pass(&self) -> bool {
        !matches!(self, Component::TruncatedCpLoss)
    }
}

impl std::str::FromStr for Component {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| crate::Error::Config(format!("unknown grad-check component '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub component: Component,
    pub trials: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<18} trials {:>4}  max rel err {:.3e}  tol {:.0e}  {}",
            self.component.name(),
            self.trials,
            self.max_relative_error,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

fn random_logits(rng: &mut ChaCha8Rng) -> (Vec<f64>, ProgressBin) {
    let n = [5, 10, 20][rng.random_range(0..3)];
    let logits = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let target = ProgressBin::new(rng.random_range(0..n), n).expect("bin within range");
    (logits, target)
}

fn logit_fd<F: Fn(&[f64]) -> f64>(logits: &[f64], f: F) -> Vec<f64> {
    (0..logits.len())
        .map(|k| {
            let mut a = logits.to_vec();
            let mut b = logits.to_vec();
            a[k] += FD_STEP;
            b[k] -= FD_STEP;
            (f(&a) - f(&b)) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Tiny combined model used by the network checks: `D = 4`, `H = 3`,
/// `C = 3`, granularities `{2, 3, 4}`.
pub fn tiny_config(kind: ProgressLossKind) -> ModelConfig {
    ModelConfig {
        input_dim: 4,
        num_classes: 3,
        hidden_size: 3,
        num_layers: 2,
        feature_len: 5,
        dropout: 0.2,
        granularities: vec![2, 3, 4],
        progress_loss: kind,
        ..ModelConfig::default()
    }
}

pub fn tiny_sample(cfg: &ModelConfig, clip_len: usize, rng: &mut ChaCha8Rng) -> ForecastSample {
    let clip = Matrix::uniform(clip_len, cfg.input_dim, 1.0, rng);
    let progress_bins = cfg
        .granularities
        .iter()
        .map(|&n| (n, ProgressBin::new(rng.random_range(0..n), n).expect("in range")))
        .collect();
    ForecastSample {
        clip,
        next_action: rng.random_range(0..cfg.num_classes),
        progress_bins,
        sequence_id: "grad-check".into(),
        clip_frame_indices: (0..clip_len).collect(),
    }
}

/// Runs `trials` randomized checks of `component`.
pub fn grad_check(component: Component, trials: usize, tolerance: f64, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let err = match component {
            Component::Losses => {
                let (logits, target) = random_logits(&mut rng);
                let (_, g) = losses::cp_loss(&logits, target).expect("valid instance");
                let n = logit_fd(&logits, |v| losses::cp_loss(v, target).expect("valid").0);
                relative_error(&g, &n)
            }
            Component::TruncatedCpLoss => {
                let (logits, target) = random_logits(&mut rng);
                let g = losses::cp_loss_truncated_gradient(&logits, target).expect("valid instance");
                let n = logit_fd(&logits, |v| losses::cp_loss(v, target).expect("valid").0);
                relative_error(&g, &n)
            }
            Component::CrossEntropy => {
                let c = rng.random_range(2..12);
                let logits: Vec<f64> = (0..c).map(|_| rng.random_range(-3.0..3.0)).collect();
                let t = rng.random_range(0..c);
                let (_, g) = losses::cross_entropy_loss(&logits, t).expect("valid instance");
                let n = logit_fd(&logits, |v| losses::cross_entropy_loss(v, t).expect("valid").0);
                relative_error(&g, &n)
            }
            Component::Streams => {
                let stack = StackedLstm::new(4, 3, 2, 0.2, &mut rng);
                let clip = Matrix::uniform(5, 4, 1.0, &mut rng);
                let w: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                let mask_seed = rng.random::<u64>();
                let readout = |s: &StackedLstm| {
                    let mut r = ChaCha8Rng::seed_from_u64(mask_seed);
                    let (h, _) = s.forward(&clip, &mut Mode::Train(&mut r)).expect("valid clip");
                    h.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
                };
                let mut r = ChaCha8Rng::seed_from_u64(mask_seed);
                let (_, cache) = stack.forward(&clip, &mut Mode::Train(&mut r)).expect("valid clip");
                let mut grads = stack.zeros_like();
                stack.backward(&cache, &w, &mut grads);
                max_relative_error(&stack, &grads, readout, FD_STEP)
            }
            Component::Combined => {
                let kinds = [ProgressLossKind::CrossEntropy, ProgressLossKind::CpLoss, ProgressLossKind::L2];
                let cfg = tiny_config(kinds[trial % kinds.len()]);
                let model = CombinedModelParams::new(cfg.clone(), &mut rng).expect("valid config");
                let sample = tiny_sample(&cfg, 5, &mut rng);
                let mask_seed = rng.random::<u64>();
                let loss = |m: &CombinedModelParams| {
                    let mut r = ChaCha8Rng::seed_from_u64(mask_seed);
                    m.loss_and_gradients(&sample, &mut Mode::Train(&mut r)).expect("valid").0.total
                };
                let mut r = ChaCha8Rng::seed_from_u64(mask_seed);
                let (_, grads) = model
                    .loss_and_gradients(&sample, &mut Mode::Train(&mut r))
                    .expect("valid sample");
                max_relative_error(&model, &grads, loss, FD_STEP)
            }
        };
        worst = worst.max(err);
    }
    GradCheckReport {
        component,
        trials,
        max_relative_error: worst,
        tolerance,
        passed: worst < tolerance,
    }
}
