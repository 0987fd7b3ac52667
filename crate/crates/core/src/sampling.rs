//! Clip sampling: random-start, equi-spaced frame selections with their
//! forecast and progress targets, optionally balanced over next actions.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabeledSequence};
use crate::error::{Error, Result};
use crate::losses::{progress_bin, ProgressBin};
use crate::model::ForecastSample;

/// How a clip's progress bin is derived from its last frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProgressTarget {
    /// Bin of the prefix ending at the last frame (1-based length).
    Prefix,
    /// Index of the equal-width window containing the last frame.
    Window,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub clip_len: usize,
    pub balance_classes: bool,
    pub granularities: Vec<usize>,
    pub seed: u64,
    /// Upper bound on the frame stride of training clips; `None` allows any
    /// stride that fits.
    pub max_stride: Option<usize>,
    pub progress_target: ProgressTarget,
    /// Also reject clips ending inside the first action of a sequence.
    pub exclude_first_action: bool,
    /// Frame stride of evaluation clips.
    pub eval_frame_stride: usize,
    /// Step between consecutive evaluation clips; `None` means `clip_len`.
    pub eval_window_step: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            clip_len: 10,
            balance_classes: true,
            granularities: vec![5, 10, 20],
            seed: 0,
            max_stride: None,
            progress_target: ProgressTarget::Prefix,
            exclude_first_action: true,
            eval_frame_stride: 1,
            eval_window_step: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_len == 0 {
            return Err(Error::Config("clip_len must be at least 1".into()));
        }
        if self.eval_frame_stride == 0 || self.eval_window_step == Some(0) || self.max_stride == Some(0) {
            return Err(Error::Config("strides must be positive".into()));
        }
        Ok(())
    }

    fn eval_step(&self) -> usize {
        self.eval_window_step.unwrap_or(self.clip_len)
    }
}

/// Last-frame positions that admit a forecast target, with that target.
///
/// A position qualifies when its action segment is neither the last one
/// (nothing follows) nor, if configured, the first one, and when it leaves
/// room for `clip_len` frames at stride one.
pub fn valid_clip_ends(seq: &LabeledSequence, cfg: &SamplerConfig) -> Vec<(usize, usize)> {
    let segments = seq.segments();
    let mut out = Vec::new();
    if segments.len() < 2 {
        return out;
    }
    let first = usize::from(cfg.exclude_first_action);
    for w in first..segments.len() - 1 {
        let (_, start, end) = segments[w];
        let target = segments[w + 1].0;
        for e in start.max(cfg.clip_len - 1)..end {
            out.push((e, target));
        }
    }
    out
}

fn progress_bins(
    end: usize,
    len: usize,
    cfg: &SamplerConfig,
) -> Result<BTreeMap<usize, ProgressBin>> {
    cfg.granularities
        .iter()
        .map(|&n| {
            let bin = match cfg.progress_target {
                ProgressTarget::Prefix => progress_bin(end + 1, len, n)?,
                ProgressTarget::Window => ProgressBin::new((end * n / len).min(n - 1), n)?,
            };
            Ok((n, bin))
        })
        .collect()
}

/// Builds the clip ending at `end` with frame stride `stride`.
pub fn clip_at(seq: &LabeledSequence, end: usize, stride: usize, cfg: &SamplerConfig) -> Result<ForecastSample> {
    let span = (cfg.clip_len - 1) * stride;
    if stride == 0 || end < span || end >= seq.len() {
        return Err(Error::Domain(format!(
            "clip of {} frames at stride {stride} cannot end at frame {end} of {}",
            cfg.clip_len,
            seq.len()
        )));
    }
    let indices: Vec<usize> = (0..cfg.clip_len).map(|j| end - span + j * stride).collect();
    let next_action = crate::model::forecast_target(seq.labels(), end)?;
    Ok(ForecastSample {
        clip: seq.features().select_rows(&indices),
        next_action,
        progress_bins: progress_bins(end, seq.len(), cfg)?,
        sequence_id: seq.id().to_string(),
        clip_frame_indices: indices,
    })
}

fn pick_stride<R: Rng + ?Sized>(end: usize, cfg: &SamplerConfig, rng: &mut R) -> usize {
    if cfg.clip_len == 1 {
        return 1;
    }
    let feasible = end / (cfg.clip_len - 1);
    let cap = cfg.max_stride.map_or(feasible, |m| m.min(feasible)).max(1);
    rng.random_range(1..=cap)
}

/// Draws one training clip from `seq`: a uniformly chosen valid last frame
/// and a uniformly chosen stride that fits before it.
pub fn sample_clip<R: Rng + ?Sized>(seq: &LabeledSequence, cfg: &SamplerConfig, rng: &mut R) -> Result<ForecastSample> {
    let ends = valid_clip_ends(seq, cfg);
    if ends.is_empty() {
        return Err(Error::Sequence {
            sequence: seq.id().to_string(),
            reason: format!("no valid clip of length {}", cfg.clip_len),
        });
    }
    let (end, _) = ends[rng.random_range(0..ends.len())];
    let stride = pick_stride(end, cfg, rng);
    clip_at(seq, end, stride, cfg)
}

/// Precomputed valid clip ends of a dataset, grouped by forecast target.
#[derive(Debug, Clone)]
pub struct ClipIndex {
    /// `(sequence, end)` pairs per target class.
    by_class: Vec<Vec<(usize, usize)>>,
    all: Vec<(usize, usize)>,
    /// Classes with at least one feasible clip.
    balanced_classes: Vec<usize>,
}

impl ClipIndex {
    pub fn new(dataset: &Dataset, cfg: &SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut by_class = vec![Vec::new(); dataset.num_classes()];
        let mut all = Vec::new();
        for (si, seq) in dataset.sequences.iter().enumerate() {
            let ends = valid_clip_ends(seq, cfg);
            if ends.is_empty() {
                log::warn!("sequence {} has no valid clip; skipped", seq.id());
            }
            for (e, target) in ends {
                if target >= by_class.len() {
                    return Err(Error::Sequence {
                        sequence: seq.id().to_string(),
                        reason: format!("label {target} outside {} classes", by_class.len()),
                    });
                }
                by_class[target].push((si, e));
                all.push((si, e));
            }
        }
        if all.is_empty() {
            return Err(Error::Domain("dataset has no valid clip".into()));
        }
        let balanced_classes: Vec<usize> = (0..by_class.len()).filter(|&c| !by_class[c].is_empty()).collect();
        for (c, pool) in by_class.iter().enumerate() {
            if pool.is_empty() {
                log::warn!(
                    "class {} ({}) is never a forecast target; excluded from balancing",
                    c,
                    dataset.class_names.get(c).map_or("?", String::as_str)
                );
            }
        }
        Ok(Self {
            by_class,
            all,
            balanced_classes,
        })
    }

    pub fn balanced_classes(&self) -> &[usize] {
        &self.balanced_classes
    }

    pub fn clip_count(&self) -> usize {
        self.all.len()
    }

    /// Two-stage draw when balancing: a target class uniformly among the
    /// feasible ones, then a clip with that target. Otherwise a uniformly
    /// random valid clip.
    pub fn draw<R: Rng + ?Sized>(&self, dataset: &Dataset, cfg: &SamplerConfig, rng: &mut R) -> Result<ForecastSample> {
        let (si, end) = if cfg.balance_classes {
            let class = self.balanced_classes[rng.random_range(0..self.balanced_classes.len())];
            let pool = &self.by_class[class];
            pool[rng.random_range(0..pool.len())]
        } else {
            self.all[rng.random_range(0..self.all.len())]
        };
        let seq = &dataset.sequences[si];
        let stride = pick_stride(end, cfg, rng);
        clip_at(seq, end, stride, cfg)
    }
}

/// `batch_size` draws from `index`.
pub fn balanced_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    index: &ClipIndex,
    cfg: &SamplerConfig,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<ForecastSample>> {
    (0..batch_size).map(|_| index.draw(dataset, cfg, rng)).collect()
}

/// Deterministic evaluation clips: windows at a fixed frame stride stepped
/// across the whole sequence, keeping those with a valid target.
pub fn evaluation_clips(seq: &LabeledSequence, cfg: &SamplerConfig) -> Result<Vec<ForecastSample>> {
    let valid: BTreeMap<usize, usize> = valid_clip_ends(seq, cfg).into_iter().collect();
    let span = (cfg.clip_len - 1) * cfg.eval_frame_stride;
    let mut out = Vec::new();
    let mut end = span;
    while end < seq.len() {
        if valid.contains_key(&end) {
            out.push(clip_at(seq, end, cfg.eval_frame_stride, cfg)?);
        }
        end += cfg.eval_step();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SyntheticConfig};
    use crate::grammar::TaskGrammar;
    use crate::tensor::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(labels: Vec<usize>) -> LabeledSequence {
        let m = labels.len();
        let f = Matrix::from_vec(m, 1, (0..m).map(|i| i as f64).collect()).unwrap();
        LabeledSequence::new(f, labels, "s").unwrap()
    }

    fn small_dataset() -> Dataset {
        let cfg = SyntheticConfig {
            sequences: 6,
            feature_dim: 4,
            ..SyntheticConfig::default()
        };
        generate_dataset(&TaskGrammar::ikea_default(), &cfg).unwrap()
    }

    #[test]
    fn stride_one_clip_from_the_start() {
        let mut labels = vec![0; 100];
        labels[50..].fill(1);
        labels[80..].fill(2);
        let s = seq(labels);
        let cfg = SamplerConfig {
            exclude_first_action: false,
            ..SamplerConfig::default()
        };
        let clip = clip_at(&s, 9, 1, &cfg).unwrap();
        assert_eq!(clip.clip_frame_indices, (0..10).collect::<Vec<_>>());
        assert_eq!(clip.next_action, 1);
        assert_eq!(clip.clip.as_slice(), &(0..10).map(f64::from).collect::<Vec<_>>()[..]);
        assert_eq!(clip.progress_bins[&10].bin(), 1);
        assert_eq!(clip.progress_bins[&5].bin(), 0);
    }

    #[test]
    fn window_target_uses_the_last_frame_window() {
        let mut labels = vec![0; 100];
        labels[50..].fill(1);
        labels[80..].fill(2);
        let s = seq(labels);
        let prefix = SamplerConfig::default();
        let window = SamplerConfig {
            progress_target: ProgressTarget::Window,
            ..SamplerConfig::default()
        };
        // Frame 59 closes the sixth tenth; frame 60 opens the seventh.
        assert_eq!(clip_at(&s, 59, 1, &prefix).unwrap().progress_bins[&10].bin(), 6);
        assert_eq!(clip_at(&s, 59, 1, &window).unwrap().progress_bins[&10].bin(), 5);
        assert_eq!(clip_at(&s, 60, 1, &window).unwrap().progress_bins[&10].bin(), 6);
    }

    #[test]
    fn valid_ends_skip_first_and_last_actions() {
        let s = seq(vec![0, 0, 1, 1, 1, 2, 2]);
        let cfg = SamplerConfig {
            clip_len: 2,
            ..SamplerConfig::default()
        };
        assert_eq!(valid_clip_ends(&s, &cfg), vec![(2, 2), (3, 2), (4, 2)]);
        let keep_first = SamplerConfig {
            exclude_first_action: false,
            ..cfg
        };
        assert_eq!(valid_clip_ends(&s, &keep_first)[0], (1, 1));
    }

    #[test]
    fn too_short_sequence_has_no_clip() {
        let s = seq(vec![0, 1, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_clip(&s, &SamplerConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn sampled_clips_are_equispaced_and_targets_differ_from_last_frame() {
        let ds = small_dataset();
        let cfg = SamplerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..10_000 {
            let s = &ds.sequences[i % ds.sequences.len()];
            let clip = sample_clip(s, &cfg, &mut rng).unwrap();
            let idx = &clip.clip_frame_indices;
            assert_eq!(idx.len(), 10);
            let stride = idx[1] - idx[0];
            assert!(stride >= 1);
            assert!(idx.windows(2).all(|w| w[1] - w[0] == stride));
            let last = *idx.last().unwrap();
            assert_ne!(s.labels()[last], clip.next_action);
            assert_eq!(clip.next_action, crate::model::forecast_target(s.labels(), last).unwrap());
        }
    }

    #[test]
    fn max_stride_caps_the_span() {
        let ds = small_dataset();
        let cfg = SamplerConfig {
            max_stride: Some(2),
            ..SamplerConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let clip = sample_clip(&ds.sequences[0], &cfg, &mut rng).unwrap();
            let idx = &clip.clip_frame_indices;
            assert!(idx[1] - idx[0] <= 2);
        }
    }

    #[test]
    fn unbalanced_draws_follow_natural_frequencies() {
        let ds = small_dataset();
        let cfg = SamplerConfig {
            balance_classes: false,
            ..SamplerConfig::default()
        };
        let index = ClipIndex::new(&ds, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = vec![0usize; ds.num_classes()];
        for _ in 0..10_000 {
            counts[index.draw(&ds, &cfg, &mut rng).unwrap().next_action] += 1;
        }
        let max = *counts.iter().max().unwrap() as f64;
        let min = *counts.iter().filter(|&&c| c > 0).min().unwrap() as f64;
        assert!(max / min > 2.0, "{counts:?}");
    }

    #[test]
    fn degenerate_dataset_draws_its_only_class() {
        let s = seq(vec![0, 0, 0, 1, 1, 1, 1, 2, 2]);
        let ds = Dataset {
            class_names: vec!["a".into(), "b".into(), "c".into()],
            sequences: vec![s],
        };
        let cfg = SamplerConfig {
            clip_len: 2,
            ..SamplerConfig::default()
        };
        let index = ClipIndex::new(&ds, &cfg).unwrap();
        assert_eq!(index.balanced_classes(), &[2]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = balanced_batch(&ds, &index, &cfg, 50, &mut rng).unwrap();
        assert!(batch.iter().all(|c| c.next_action == 2));
    }

    #[test]
    fn evaluation_clips_are_deterministic_and_step_by_clip_len() {
        let ds = small_dataset();
        let cfg = SamplerConfig::default();
        let a = evaluation_clips(&ds.sequences[0], &cfg).unwrap();
        let b = evaluation_clips(&ds.sequences[0], &cfg).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
        for clip in &a {
            let last = *clip.clip_frame_indices.last().unwrap();
            assert_eq!((last + 1) % 10, 0);
        }
    }
}
