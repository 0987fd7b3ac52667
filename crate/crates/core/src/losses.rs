//! Progress-estimation and classification losses with exact gradients.
//!
//! Progress is discretized into `N` bins. Three losses are available for a
//! progress head: squared error on the scalar bin index, softmax
//! cross-entropy over bins, and the cumulative probability loss, which
//! compares the cumulative distribution of the sigmoid-normalized head
//! output with the ground-truth step function.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::activation::{sigmoid_scalar, softmax};

/// A 0-based progress bin at granularity `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProgressBin {
    bin: usize,
    n: usize,
}

impl ProgressBin {
    pub fn new(bin: usize, n: usize) -> Result<Self> {
        if n == 0 || bin >= n {
            return Err(Error::Domain(format!("bin {bin} outside granularity {n}")));
        }
        Ok(Self { bin, n })
    }

    pub fn bin(&self) -> usize {
        self.bin
    }

    pub fn granularity(&self) -> usize {
        self.n
    }

    pub fn one_hot(&self) -> OneHotProgress {
        OneHotProgress::new(*self)
    }
}

/// Binary indicator vector of a progress bin.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotProgress(Vec<f64>);

impl OneHotProgress {
    pub fn new(bin: ProgressBin) -> Self {
        let mut v = vec![0.0; bin.granularity()];
        v[bin.bin()] = 1.0;
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Upper-triangular all-ones `N × N` matrix; `p · M` is the CDF of `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CumulativeMatrix {
    n: usize,
}

impl CumulativeMatrix {
    pub fn new(n: usize) -> Self {
        Self { n }
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        if i <= j {
            1.0
        } else {
            0.0
        }
    }

    /// Row vector times the matrix.
    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        assert_eq!(row.len(), self.n);
        (0..self.n)
            .map(|j| (0..self.n).map(|i| row[i] * self.entry(i, j)).sum())
            .collect()
    }
}

/// Which loss trains the progress heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProgressLossKind {
    CrossEntropy,
    #[serde(rename = "cploss", alias = "cp-loss")]
    CpLoss,
    L2,
}

impl ProgressLossKind {
    pub fn label(&self) -> &'static str {
        match self {
            ProgressLossKind::CrossEntropy => "cross-entropy",
            ProgressLossKind::CpLoss => "cploss",
            ProgressLossKind::L2 => "l2",
        }
    }

    /// Width of a progress head at granularity `n`. Regression predicts one
    /// scalar bin index.
    pub fn head_width(&self, n: usize) -> usize {
        match self {
            ProgressLossKind::L2 => 1,
            _ => n,
        }
    }
}

impl std::str::FromStr for ProgressLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cross-entropy" | "crossentropy" | "ce" => Ok(ProgressLossKind::CrossEntropy),
            "cploss" | "cp-loss" | "cp" => Ok(ProgressLossKind::CpLoss),
            "l2" | "euclidean" => Ok(ProgressLossKind::L2),
            other => Err(Error::Config(format!("unknown progress loss '{other}'"))),
        }
    }
}

/// Maps a prefix of `prefix_len` frames out of `total_len` to its bin,
/// `floor(prefix_len · n / total_len)`, clamped to `n - 1` at the end.
pub fn progress_bin(prefix_len: usize, total_len: usize, n: usize) -> Result<ProgressBin> {
    if total_len == 0 || n == 0 || prefix_len == 0 || prefix_len > total_len {
        return Err(Error::Domain(format!(
            "progress of prefix {prefix_len} in sequence {total_len} at granularity {n}"
        )));
    }
    let bin = (prefix_len * n / total_len).min(n - 1);
    ProgressBin::new(bin, n)
}

/// Squared error `(g - ĝ)²` and its derivative with respect to `ĝ`.
pub fn l2_progress_loss(target: f64, predicted: f64) -> (f64, f64) {
    let d = target - predicted;
    (d * d, -2.0 * d)
}

/// `-log softmax(logits)[target]` and its gradient `softmax - one_hot`.
pub fn cross_entropy_loss(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::Domain(format!(
            "target class {target} with {} logits",
            logits.len()
        )));
    }
    let p = softmax(logits);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    let loss = lse - logits[target];
    let mut grad = p;
    grad[target] -= 1.0;
    Ok((loss, grad))
}

fn cdf(p: &[f64]) -> Vec<f64> {
    p.iter()
        .scan(0.0, |acc, &x| {
            *acc += x;
            Some(*acc)
        })
        .collect()
}

/// `Σ_j (P_j - V_j)²` between the CDF of `p` and the step CDF of `target`.
pub fn cdf_distance(p: &[f64], target: ProgressBin) -> Result<f64> {
    if p.len() != target.granularity() {
        return Err(Error::Shape(format!(
            "{} probabilities for granularity {}",
            p.len(),
            target.granularity()
        )));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("probabilities sum to {total}")));
    }
    Ok(cdf(p)
        .iter()
        .enumerate()
        .map(|(j, &pj)| {
            let vj = if j >= target.bin() { 1.0 } else { 0.0 };
            (pj - vj).powi(2)
        })
        .sum())
}

struct CpForward {
    sig: Vec<f64>,
    z: f64,
    cdf: Vec<f64>,
    residual: Vec<f64>,
}

fn cp_forward(logits: &[f64], target: ProgressBin) -> Result<CpForward> {
    let n = logits.len();
    if n == 0 {
        return Err(Error::Domain("cumulative probability loss with zero bins".into()));
    }
    if n != target.granularity() {
        return Err(Error::Shape(format!(
            "{n} logits for granularity {}",
            target.granularity()
        )));
    }
    let sig: Vec<f64> = logits.iter().map(|&v| sigmoid_scalar(v)).collect();
    let z: f64 = sig.iter().sum();
    assert!(z > 1e-12, "sigmoid mass vanished");
    let p: Vec<f64> = sig.iter().map(|s| s / z).collect();
    let cdf = cdf(&p);
    let residual = cdf
        .iter()
        .enumerate()
        .map(|(j, &pj)| pj - if j >= target.bin() { 1.0 } else { 0.0 })
        .collect();
    Ok(CpForward {
        sig,
        z,
        cdf,
        residual,
    })
}

/// Cumulative probability loss and its exact gradient with respect to the
/// raw head outputs.
///
/// With `s = σ(v̂)`, `Z = Σ s` and `P` the CDF of `s / Z`:
/// `∂L/∂v̂_k = 2 s_k (1 - s_k) / Z · Σ_j (P_j - V_j)(1[k ≤ j] - P_j)`.
pub fn cp_loss(logits: &[f64], target: ProgressBin) -> Result<(f64, Vec<f64>)> {
    let f = cp_forward(logits, target)?;
    let n = logits.len();
    let loss = f.residual.iter().map(|r| r * r).sum();

    // Σ_j r_j (1[k ≤ j] - P_j) = tail_k - Σ_j r_j P_j, where tail_k = Σ_{j≥k} r_j.
    let weighted: f64 = f.residual.iter().zip(&f.cdf).map(|(r, p)| r * p).sum();
    let mut grad = vec![0.0; n];
    let mut tail = 0.0;
    for k in (0..n).rev() {
        tail += f.residual[k];
        let s = f.sig[k];
        grad[k] = 2.0 * s * (1.0 - s) / f.z * (tail - weighted);
    }
    Ok((loss, grad))
}

/// The single-term gradient `2 h_k · Σ_{i>k} σ(v̂_i) / Z² · σ'(v̂_k)`, which
/// keeps only the `j = k` summand of the exact gradient. Diagnostic only;
/// it does not agree with finite differences.
pub fn cp_loss_truncated_gradient(logits: &[f64], target: ProgressBin) -> Result<Vec<f64>> {
    let f = cp_forward(logits, target)?;
    let n = logits.len();
    let mut grad = vec![0.0; n];
    let mut suffix = 0.0;
    for k in (0..n).rev() {
        let s = f.sig[k];
        grad[k] = 2.0 * f.residual[k] * suffix / (f.z * f.z) * s * (1.0 - s);
        suffix += s;
    }
    Ok(grad)
}

/// Arg-max bin, ties toward the lower index.
pub fn predicted_bin(logits: &[f64]) -> usize {
    assert!(!logits.is_empty(), "argmax of empty logits");
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}
