//! The four-stream forecaster: a local next-action stream, progress streams
//! at several granularities, and a fusion head over their projected
//! features.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, ProgressBin, ProgressLossKind};
use crate::nn::{Dense, Mode, Parameters, StackedLstm, StackedLstmCache};
use crate::tensor::Matrix;

/// Per-term loss weights. Every weight defaults to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub fused: f64,
    pub local: f64,
    pub progress: f64,
    /// Overrides `progress` for individual granularities.
    pub per_granularity: BTreeMap<usize, f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            fused: 1.0,
            local: 1.0,
            progress: 1.0,
            per_granularity: BTreeMap::new(),
        }
    }
}

impl LossWeights {
    pub fn for_granularity(&self, n: usize) -> f64 {
        self.per_granularity.get(&n).copied().unwrap_or(self.progress)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub feature_len: usize,
    pub dropout: f64,
    /// Progress streams, e.g. `[5, 10, 20]`; empty for the local-only model.
    pub granularities: Vec<usize>,
    pub progress_loss: ProgressLossKind,
    pub weights: LossWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 64,
            num_classes: 12,
            hidden_size: 32,
            num_layers: 2,
            feature_len: 100,
            dropout: 0.2,
            granularities: vec![5, 10, 20],
            progress_loss: ProgressLossKind::CrossEntropy,
            weights: LossWeights::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes < 2 || self.hidden_size == 0 || self.num_layers == 0 {
            return Err(Error::Config(format!(
                "input_dim {}, classes {}, hidden {}, layers {}",
                self.input_dim, self.num_classes, self.hidden_size, self.num_layers
            )));
        }
        if self.feature_len == 0 {
            return Err(Error::Config("feature_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.granularities.contains(&0) {
            return Err(Error::Config("granularity 0".into()));
        }
        let mut seen = self.granularities.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.granularities.len() {
            return Err(Error::Config("duplicate granularity".into()));
        }
        Ok(())
    }

    /// Width of the fused head's input.
    pub fn fusion_width(&self) -> usize {
        self.feature_len * (1 + self.granularities.len())
    }

    /// `local`, `+5`, `+5+10`, `+5+10+20`, ...
    pub fn variant_name(&self) -> String {
        if self.granularities.is_empty() {
            "local".into()
        } else {
            self.granularities.iter().map(|n| format!("+{n}")).collect()
        }
    }
}

/// Parses `local`, `combined` (= `+5+10+20`) or a `+N+M...` list.
pub fn parse_variant(name: &str) -> Result<Vec<usize>> {
    match name {
        "local" => Ok(Vec::new()),
        "combined" | "full" => Ok(vec![5, 10, 20]),
        other => {
            let parts: Vec<&str> = other.split('+').filter(|p| !p.is_empty()).collect();
            if parts.is_empty() || !other.starts_with('+') {
                return Err(Error::Config(format!("unknown model variant '{other}'")));
            }
            parts
                .iter()
                .map(|p| {
                    p.parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad granularity '{p}' in '{other}'")))
                })
                .collect()
        }
    }
}

/// The ablation ladder of progress streams.
pub const ABLATION_VARIANTS: [&str; 4] = ["local", "+5", "+5+10", "+5+10+20"];

/// Stacked LSTM, tanh projection to the stream feature, and a linear head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamParams {
    pub lstm: StackedLstm,
    pub projection: Dense,
    pub head: Dense,
}

#[derive(Debug, Clone)]
pub struct StreamCache {
    lstm: StackedLstmCache,
    hidden: Vec<f64>,
    feature: Vec<f64>,
}

/// Head logits and the projected stream feature.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamOutput {
    pub logits: Vec<f64>,
    pub feature: Vec<f64>,
}

impl StreamParams {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, head_width: usize, rng: &mut R) -> Self {
        Self {
            lstm: StackedLstm::new(cfg.input_dim, cfg.hidden_size, cfg.num_layers, cfg.dropout, rng),
            projection: Dense::new(cfg.hidden_size, cfg.feature_len, rng),
            head: Dense::new(cfg.feature_len, head_width, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            lstm: self.lstm.zeros_like(),
            projection: Dense::zeros(self.projection.input_dim(), self.projection.output_dim()),
            head: Dense::zeros(self.head.input_dim(), self.head.output_dim()),
        }
    }

    pub fn forward(&self, clip: &Matrix, mode: &mut Mode<'_>) -> Result<(StreamOutput, StreamCache)> {
        let (hidden, lstm) = self.lstm.forward(clip, mode)?;
        let feature: Vec<f64> = self.projection.forward(&hidden).iter().map(|v| v.tanh()).collect();
        let logits = self.head.forward(&feature);
        Ok((
            StreamOutput {
                logits,
                feature: feature.clone(),
            },
            StreamCache {
                lstm,
                hidden,
                feature,
            },
        ))
    }

    /// `d_feature_extra` carries the gradient arriving from the fusion head.
    pub fn backward(&self, cache: &StreamCache, d_logits: &[f64], d_feature_extra: &[f64], grads: &mut StreamParams) {
        let mut d_feature = self.head.backward(&cache.feature, d_logits, &mut grads.head);
        for (d, e) in d_feature.iter_mut().zip(d_feature_extra) {
            *d += e;
        }
        let d_pre: Vec<f64> = d_feature
            .iter()
            .zip(&cache.feature)
            .map(|(d, f)| d * (1.0 - f * f))
            .collect();
        let d_hidden = self.projection.backward(&cache.hidden, &d_pre, &mut grads.projection);
        self.lstm.backward(&cache.lstm, &d_hidden, &mut grads.lstm);
    }
}

impl Parameters for StreamParams {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut v = self.lstm.tensors();
        v.extend(self.projection.tensors());
        v.extend(self.head.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.lstm.tensors_mut();
        v.extend(self.projection.tensors_mut());
        v.extend(self.head.tensors_mut());
        v
    }

    fn named_tensors(&self, prefix: &str) -> Vec<(String, &Matrix)> {
        let mut v = self.lstm.named_tensors(&format!("{prefix}.lstm"));
        v.extend(self.projection.named_tensors(&format!("{prefix}.projection")));
        v.extend(self.head.named_tensors(&format!("{prefix}.head")));
        v
    }
}

/// Local stream: next-action logits (length C) and the stream feature.
pub fn forward_local(params: &StreamParams, clip: &Matrix, mode: &mut Mode<'_>) -> Result<StreamOutput> {
    Ok(params.forward(clip, mode)?.0)
}

/// Progress stream at granularity `n`: bin logits and the stream feature.
pub fn forward_progress(params: &StreamParams, clip: &Matrix, n: usize, mode: &mut Mode<'_>) -> Result<StreamOutput> {
    let width = params.head.output_dim();
    if width != n && width != 1 {
        return Err(Error::Shape(format!("progress head has {width} outputs, granularity is {n}")));
    }
    Ok(params.forward(clip, mode)?.0)
}

/// All trainable weights of the fused forecaster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedModelParams {
    pub config: ModelConfig,
    pub local: StreamParams,
    /// One stream per entry of `config.granularities`, same order.
    pub progress: Vec<StreamParams>,
    pub fusion: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedOutput {
    pub fused_logits: Vec<f64>,
    pub local_logits: Vec<f64>,
    /// `(granularity, head output)` per progress stream.
    pub progress_logits: Vec<(usize, Vec<f64>)>,
    /// Fusion input: the concatenated stream features.
    pub features: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CombinedCache {
    local: StreamCache,
    progress: Vec<StreamCache>,
    features: Vec<f64>,
}

/// Gradients of the loss with respect to every model output.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGradients {
    pub fused: Vec<f64>,
    pub local: Vec<f64>,
    pub progress: Vec<Vec<f64>>,
}

/// Per-term losses for one sample (unweighted) and the weighted total.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub fused: f64,
    pub local: f64,
    pub progress: Vec<(usize, f64)>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, other: &LossBreakdown) {
        self.fused += other.fused;
        self.local += other.local;
        self.total += other.total;
        if self.progress.is_empty() {
            self.progress = other.progress.clone();
        } else {
            for (a, b) in self.progress.iter_mut().zip(&other.progress) {
                a.1 += b.1;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.fused *= alpha;
        self.local *= alpha;
        self.total *= alpha;
        for p in &mut self.progress {
            p.1 *= alpha;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.fused.is_finite() && self.local.is_finite()
            && self.progress.iter().all(|p| p.1.is_finite())
    }

    /// `(term, value)` rows: `fused`, `local`, `progress_5`, ..., `total`.
    pub fn terms(&self) -> Vec<(String, f64)> {
        let mut v = vec![("fused".to_string(), self.fused), ("local".to_string(), self.local)];
        v.extend(self.progress.iter().map(|(n, l)| (format!("progress_{n}"), *l)));
        v.push(("total".to_string(), self.total));
        v
    }
}

/// A clip and every target the model is trained against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSample {
    pub clip: Matrix,
    pub next_action: usize,
    pub progress_bins: BTreeMap<usize, ProgressBin>,
    pub sequence_id: String,
    pub clip_frame_indices: Vec<usize>,
}

/// The first label after `last_index` that differs from the label there.
pub fn forecast_target(labels: &[usize], last_index: usize) -> Result<usize> {
    if last_index >= labels.len() {
        return Err(Error::Domain(format!(
            "frame {last_index} outside a sequence of {}",
            labels.len()
        )));
    }
    let current = labels[last_index];
    labels[last_index + 1..]
        .iter()
        .copied()
        .find(|&l| l != current)
        .ok_or(Error::EndOfSequence { index: last_index })
}

impl CombinedModelParams {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let local = StreamParams::new(&config, config.num_classes, rng);
        let progress = config
            .granularities
            .iter()
            .map(|&n| StreamParams::new(&config, config.progress_loss.head_width(n), rng))
            .collect();
        let fusion = Dense::new(config.fusion_width(), config.num_classes, rng);
        Ok(Self {
            config,
            local,
            progress,
            fusion,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            local: self.local.zeros_like(),
            progress: self.progress.iter().map(StreamParams::zeros_like).collect(),
            fusion: Dense::zeros(self.fusion.input_dim(), self.fusion.output_dim()),
        }
    }

    pub fn forward(&self, clip: &Matrix, mode: &mut Mode<'_>) -> Result<(CombinedOutput, CombinedCache)> {
        if clip.cols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "clip has {} features per frame, model expects {}",
                clip.cols(),
                self.config.input_dim
            )));
        }
        let (local_out, local_cache) = self.local.forward(clip, mode)?;
        let mut features = local_out.feature;
        let mut progress_logits = Vec::with_capacity(self.progress.len());
        let mut progress_caches = Vec::with_capacity(self.progress.len());
        for (stream, &n) in self.progress.iter().zip(&self.config.granularities) {
            let (out, cache) = stream.forward(clip, mode)?;
            features.extend_from_slice(&out.feature);
            progress_logits.push((n, out.logits));
            progress_caches.push(cache);
        }
        let fused_logits = self.fusion.forward(&features);
        Ok((
            CombinedOutput {
                fused_logits,
                local_logits: local_out.logits,
                progress_logits,
                features: features.clone(),
            },
            CombinedCache {
                local: local_cache,
                progress: progress_caches,
                features,
            },
        ))
    }

    /// Backpropagates output gradients into a fresh gradient set.
    pub fn backward(&self, cache: &CombinedCache, d_out: &OutputGradients) -> CombinedModelParams {
        let mut grads = self.zeros_like();
        let d_features = self.fusion.backward(&cache.features, &d_out.fused, &mut grads.fusion);
        let f = self.config.feature_len;
        self.local.backward(&cache.local, &d_out.local, &d_features[..f], &mut grads.local);
        for (i, stream) in self.progress.iter().enumerate() {
            let slice = &d_features[f * (i + 1)..f * (i + 2)];
            stream.backward(&cache.progress[i], &d_out.progress[i], slice, &mut grads.progress[i]);
        }
        grads
    }

    /// Forward, loss and backward for one sample.
    pub fn loss_and_gradients(
        &self,
        sample: &ForecastSample,
        mode: &mut Mode<'_>,
    ) -> Result<(LossBreakdown, CombinedModelParams)> {
        let (out, cache) = self.forward(&sample.clip, mode)?;
        let (loss, d_out) = combined_loss(&out, sample, self.config.progress_loss, &self.config.weights)?;
        Ok((loss, self.backward(&cache, &d_out)))
    }

    /// Eval-mode prediction: fused action class and progress bin per stream.
    pub fn predict(&self, clip: &Matrix) -> Result<Prediction> {
        let (out, _) = self.forward(clip, &mut Mode::Eval)?;
        let progress = out
            .progress_logits
            .iter()
            .map(|(n, logits)| (*n, progress_prediction(self.config.progress_loss, *n, logits)))
            .collect();
        Ok(Prediction {
            action: losses::predicted_bin(&out.fused_logits),
            local_action: losses::predicted_bin(&out.local_logits),
            progress,
        })
    }
}

impl Parameters for CombinedModelParams {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut v = self.local.tensors();
        for s in &self.progress {
            v.extend(s.tensors());
        }
        v.extend(self.fusion.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.local.tensors_mut();
        for s in &mut self.progress {
            v.extend(s.tensors_mut());
        }
        v.extend(self.fusion.tensors_mut());
        v
    }

    fn named_tensors(&self, prefix: &str) -> Vec<(String, &Matrix)> {
        let join = |name: &str| {
            if prefix.is_empty() {
                name.to_string()
            } else {
                format!("{prefix}.{name}")
            }
        };
        let mut v = self.local.named_tensors(&join("act"));
        for (s, n) in self.progress.iter().zip(&self.config.granularities) {
            v.extend(s.named_tensors(&join(&format!("progress{n}"))));
        }
        v.extend(self.fusion.named_tensors(&join("fusion")));
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub action: usize,
    pub local_action: usize,
    pub progress: Vec<(usize, usize)>,
}

/// Predicted bin from a progress head: arg-max, or the rounded regression
/// value clamped into range.
pub fn progress_prediction(kind: ProgressLossKind, n: usize, logits: &[f64]) -> usize {
    match kind {
        ProgressLossKind::L2 => logits[0].round().clamp(0.0, (n - 1) as f64) as usize,
        _ => losses::predicted_bin(logits),
    }
}

/// Weighted sum of the fused and local cross-entropies and the progress
/// losses, with its gradient with respect to every output.
pub fn combined_loss(
    out: &CombinedOutput,
    sample: &ForecastSample,
    kind: ProgressLossKind,
    weights: &LossWeights,
) -> Result<(LossBreakdown, OutputGradients)> {
    let (fused, mut d_fused) = losses::cross_entropy_loss(&out.fused_logits, sample.next_action)?;
    let (local, mut d_local) = losses::cross_entropy_loss(&out.local_logits, sample.next_action)?;
    d_fused.iter_mut().for_each(|g| *g *= weights.fused);
    d_local.iter_mut().for_each(|g| *g *= weights.local);
    let mut total = weights.fused * fused + weights.local * local;

    let mut progress = Vec::with_capacity(out.progress_logits.len());
    let mut d_progress = Vec::with_capacity(out.progress_logits.len());
    for (n, logits) in &out.progress_logits {
        let target = sample
            .progress_bins
            .get(n)
            .ok_or_else(|| Error::Domain(format!("sample has no progress target for granularity {n}")))?;
        let (l, mut g) = match kind {
            ProgressLossKind::CrossEntropy => losses::cross_entropy_loss(logits, target.bin())?,
            ProgressLossKind::CpLoss => losses::cp_loss(logits, *target)?,
            ProgressLossKind::L2 => {
                if logits.len() != 1 {
                    return Err(Error::Shape(format!("regression head has {} outputs", logits.len())));
                }
                let (l, g) = losses::l2_progress_loss(target.bin() as f64, logits[0]);
                (l, vec![g])
            }
        };
        let w = weights.for_granularity(*n);
        g.iter_mut().for_each(|x| *x *= w);
        total += w * l;
        progress.push((*n, l));
        d_progress.push(g);
    }
    Ok((
        LossBreakdown {
            fused,
            local,
            progress,
            total,
        },
        OutputGradients {
            fused: d_fused,
            local: d_local,
            progress: d_progress,
        },
    ))
}
