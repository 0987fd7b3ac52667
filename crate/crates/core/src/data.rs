//! Labeled per-frame feature sequences: synthetic generation from a task
//! grammar, and the on-disk dataset format.
//!
//! Feature files hold an 8-byte header (`u32` rows, `u32` cols, little
//! endian) followed by `rows × cols` little-endian `f32` values, row major.
//! Label files hold one ASCII integer per line. A `manifest.toml` lists the
//! pairs together with the class names and null classes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{TaskGrammar, TimedAction};
use crate::tensor::Matrix;

pub const MANIFEST_FILE: &str = "manifest.toml";

/// One full task execution: `M × D` features and `M` frame labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence {
    features: Matrix,
    labels: Vec<usize>,
    source_id: String,
}

impl LabeledSequence {
    pub fn new(features: Matrix, labels: Vec<usize>, source_id: impl Into<String>) -> Result<Self> {
        let source_id = source_id.into();
        let fail = |reason: String| Error::Sequence {
            sequence: source_id.clone(),
            reason,
        };
        if features.rows() != labels.len() {
            return Err(fail(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if labels.len() < 2 {
            return Err(fail(format!("only {} frames", labels.len())));
        }
        let distinct: BTreeSet<_> = labels.iter().collect();
        if distinct.len() < 2 {
            return Err(fail("fewer than two distinct actions".into()));
        }
        Ok(Self {
            features,
            labels,
            source_id,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn id(&self) -> &str {
        &self.source_id
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Maximal runs of equal labels as `(class, start, end_exclusive)`.
    pub fn segments(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.labels.len() {
            if i == self.labels.len() || self.labels[i] != self.labels[start] {
                out.push((self.labels[start], start, i));
                start = i;
            }
        }
        out
    }
}

/// A set of sequences sharing a label space.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub sequences: Vec<LabeledSequence>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.sequences.first().map_or(0, LabeledSequence::feature_dim)
    }

    /// Splits by sequence id: the listed ids go to the second half.
    pub fn split_by_ids(&self, held_out: &BTreeSet<String>) -> (Dataset, Dataset) {
        let (test, train): (Vec<_>, Vec<_>) = self
            .sequences
            .iter()
            .cloned()
            .partition(|s| held_out.contains(s.id()));
        (
            Dataset {
                class_names: self.class_names.clone(),
                sequences: train,
            },
            Dataset {
                class_names: self.class_names.clone(),
                sequences: test,
            },
        )
    }

    /// The last `count` sequences (in id order) become the second half.
    /// Errors if any sequence id appears in both datasets.
    pub fn ensure_disjoint(&self, other: &Dataset) -> Result<()> {
        let ids: BTreeSet<&str> = self.sequences.iter().map(|s| s.id()).collect();
        match other.sequences.iter().find(|s| ids.contains(s.id())) {
            Some(s) => Err(Error::Config(format!("sequence {} is in both splits", s.id()))),
            None => Ok(()),
        }
    }

    pub fn split_tail(&self, count: usize) -> (Dataset, Dataset) {
        let mut ids: Vec<&str> = self.sequences.iter().map(LabeledSequence::id).collect();
        ids.sort_unstable();
        let held: BTreeSet<String> = ids
            .iter()
            .rev()
            .take(count)
            .map(|s| s.to_string())
            .collect();
        self.split_by_ids(&held)
    }
}

/// Per-class Gaussian frame features with temporal smoothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureModel {
    pub class_means: Vec<Vec<f64>>,
    pub noise_std: f64,
    pub smoothing_window: usize,
    /// Offset each completed action leaves on every later frame, so the
    /// scene drifts as the task advances. Empty disables it.
    pub scene_effects: Vec<Vec<f64>>,
}

impl FeatureModel {
    /// Random class means with i.i.d. `N(0, separation² / D)` entries, so
    /// every mean has norm close to `separation`. Scene effects are drawn
    /// the same way with norm near `scene_strength`.
    pub fn random<R: Rng + ?Sized>(
        num_classes: usize,
        dim: usize,
        separation: f64,
        noise_std: f64,
        smoothing_window: usize,
        scene_strength: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut gaussian_rows = |norm: f64| -> Vec<Vec<f64>> {
            let scale = norm / (dim.max(1) as f64).sqrt();
            (0..num_classes)
                .map(|_| {
                    (0..dim)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(rng);
                            scale * z
                        })
                        .collect()
                })
                .collect()
        };
        let class_means = gaussian_rows(separation);
        let scene_effects = if scene_strength > 0.0 {
            gaussian_rows(scene_strength)
        } else {
            Vec::new()
        };
        let fm = Self {
            class_means,
            noise_std,
            smoothing_window,
            scene_effects,
        };
        fm.validate()?;
        Ok(fm)
    }

    pub fn dim(&self) -> usize {
        self.class_means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::Config("feature model has zero dimensions".into()));
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 || self.smoothing_window == 0 {
            return Err(Error::Config(format!(
                "noise_std {} / smoothing_window {} out of range",
                self.noise_std, self.smoothing_window
            )));
        }
        for (i, m) in self.class_means.iter().enumerate() {
            if m.len() != d {
                return Err(Error::Config(format!("class mean {i} has length {}", m.len())));
            }
            if self.class_means[..i].iter().any(|o| o == m) {
                return Err(Error::Config(format!("class mean {i} duplicates another")));
            }
        }
        if !self.scene_effects.is_empty()
            && (self.scene_effects.len() != self.class_means.len() || self.scene_effects.iter().any(|e| e.len() != d))
        {
            return Err(Error::Config("scene effects must match the class means in shape".into()));
        }
        Ok(())
    }

    /// Renders an action order into frames: class mean plus Gaussian noise,
    /// then a centered moving average across time. Values are rounded to
    /// `f32` precision so they survive the on-disk format unchanged.
    pub fn emit_features<R: Rng + ?Sized>(
        &self,
        order: &[TimedAction],
        source_id: &str,
        rng: &mut R,
    ) -> Result<LabeledSequence> {
        if order.is_empty() {
            return Err(Error::Domain("empty action order".into()));
        }
        let d = self.dim();
        let labels: Vec<usize> = order
            .iter()
            .flat_map(|a| std::iter::repeat_n(a.class, a.frames))
            .collect();
        if let Some(&c) = labels.iter().find(|&&c| c >= self.class_means.len()) {
            return Err(Error::Domain(format!("no feature mean for class {c}")));
        }
        let noise = Normal::new(0.0, self.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut scene = vec![0.0; d];
        let mut raw: Vec<Vec<f64>> = Vec::with_capacity(labels.len());
        for a in order {
            for _ in 0..a.frames {
                raw.push(
                    self.class_means[a.class]
                        .iter()
                        .zip(&scene)
                        .map(|(&mu, &s)| mu + s + noise.sample(rng))
                        .collect(),
                );
            }
            if let Some(effect) = self.scene_effects.get(a.class) {
                for (s, e) in scene.iter_mut().zip(effect) {
                    *s += e;
                }
            }
        }

        let m = labels.len();
        let half = self.smoothing_window / 2;
        let mut data = Vec::with_capacity(m * d);
        for t in 0..m {
            let lo = t.saturating_sub(half);
            // Even widths lean one frame into the past.
            let hi = (t + self.smoothing_window - half).min(m);
            let count = (hi - lo) as f64;
            for k in 0..d {
                let avg = raw[lo..hi].iter().map(|r| r[k]).sum::<f64>() / count;
                data.push(avg as f32 as f64);
            }
        }
        LabeledSequence::new(Matrix::from_vec(m, d, data)?, labels, source_id)
    }
}

/// Everything needed to regenerate a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub sequences: usize,
    pub seed: u64,
    pub feature_dim: usize,
    pub class_separation: f64,
    pub noise_std: f64,
    pub smoothing_window: usize,
    /// Norm of the per-action scene offsets; zero turns them off.
    pub scene_strength: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            sequences: 48,
            seed: 1,
            feature_dim: 64,
            class_separation: 1.0,
            noise_std: 1.0,
            smoothing_window: 5,
            scene_strength: 0.3,
        }
    }
}

/// Per-sequence RNG stream derived from the master seed.
pub fn sequence_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index + 1);
    rng
}

/// Generates `cfg.sequences` executions of `grammar`, ids `seq-0000`, ...
pub fn generate_dataset(grammar: &TaskGrammar, cfg: &SyntheticConfig) -> Result<Dataset> {
    grammar.validate()?;
    let mut model_rng = sequence_rng(cfg.seed, u64::MAX - 1);
    let fm = FeatureModel::random(
        grammar.num_classes(),
        cfg.feature_dim,
        cfg.class_separation,
        cfg.noise_std,
        cfg.smoothing_window,
        cfg.scene_strength,
        &mut model_rng,
    )?;
    let sequences = (0..cfg.sequences)
        .map(|i| {
            let mut rng = sequence_rng(cfg.seed, i as u64);
            let order = grammar.generate_action_order(&mut rng)?;
            fm.emit_features(&order, &format!("seq-{i:04}"), &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        class_names: grammar.actions.clone(),
        sequences,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub features: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub feature_dim: usize,
    pub class_names: Vec<String>,
    #[serde(default)]
    pub null_class_ids: Vec<usize>,
    #[serde(default)]
    pub sequences: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub fn write_feature_file(path: &Path, features: &Matrix) -> Result<()> {
    let rows = u32::try_from(features.rows()).map_err(|_| Error::Shape("too many rows".into()))?;
    let cols = u32::try_from(features.cols()).map_err(|_| Error::Shape("too many cols".into()))?;
    let mut buf = Vec::with_capacity(8 + 4 * features.len());
    buf.extend_from_slice(&rows.to_le_bytes());
    buf.extend_from_slice(&cols.to_le_bytes());
    for &v in features.as_slice() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 8 {
        return Err(corrupt("missing 8-byte header".into()));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let payload = &bytes[8..];
    if payload.len() != rows * cols * 4 {
        return Err(corrupt(format!(
            "header says {rows}x{cols} but payload holds {} bytes",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn write_label_file(path: &Path, labels: &[usize]) -> Result<()> {
    let mut text = String::with_capacity(labels.len() * 3);
    for l in labels {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_label_file(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.parse().map_err(|_| Error::Corrupt {
                path: path.to_path_buf(),
                reason: format!("line {}: '{l}' is not a class index", i + 1),
            })
        })
        .collect()
}

/// Writes every sequence plus `manifest.toml` into `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(dataset.sequences.len());
    for seq in &dataset.sequences {
        let features = PathBuf::from(format!("{}.feat", seq.id()));
        let labels = PathBuf::from(format!("{}.labels", seq.id()));
        write_feature_file(&dir.join(&features), seq.features())?;
        write_label_file(&dir.join(&labels), seq.labels())?;
        entries.push(ManifestEntry {
            id: seq.id().to_string(),
            features,
            labels,
        });
    }
    let manifest = DatasetManifest {
        feature_dim: dataset.feature_dim(),
        class_names: dataset.class_names.clone(),
        null_class_ids: Vec::new(),
        sequences: entries,
    };
    manifest.write(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Loads every sequence listed in `manifest`, resolving relative paths
/// against `root`.
///
/// Frames labeled with a null class are removed and the remaining classes
/// renumbered densely. Sequences left with fewer than two distinct actions
/// are skipped with a warning.
pub fn load_dataset(manifest: &DatasetManifest, root: &Path) -> Result<Dataset> {
    let nulls: BTreeSet<usize> = manifest.null_class_ids.iter().copied().collect();
    let remap: BTreeMap<usize, usize> = (0..manifest.class_names.len())
        .filter(|c| !nulls.contains(c))
        .enumerate()
        .map(|(new, old)| (old, new))
        .collect();
    let class_names = remap
        .keys()
        .map(|&old| manifest.class_names[old].clone())
        .collect();

    let mut sequences = Vec::with_capacity(manifest.sequences.len());
    for entry in &manifest.sequences {
        let features = read_feature_file(&root.join(&entry.features))?;
        let labels = read_label_file(&root.join(&entry.labels))?;
        let fail = |reason: String| Error::Sequence {
            sequence: entry.id.clone(),
            reason,
        };
        if features.rows() != labels.len() {
            return Err(fail(format!(
                "{} feature rows but {} label lines",
                features.rows(),
                labels.len()
            )));
        }
        if features.cols() != manifest.feature_dim {
            return Err(fail(format!(
                "{} features per frame, manifest says {}",
                features.cols(),
                manifest.feature_dim
            )));
        }
        let mut keep = Vec::with_capacity(labels.len());
        let mut kept_labels = Vec::with_capacity(labels.len());
        for (i, &l) in labels.iter().enumerate() {
            if nulls.contains(&l) {
                continue;
            }
            let mapped = *remap
                .get(&l)
                .ok_or_else(|| fail(format!("label {l} outside the class list")))?;
            keep.push(i);
            kept_labels.push(mapped);
        }
        match LabeledSequence::new(features.select_rows(&keep), kept_labels, entry.id.clone()) {
            Ok(seq) => sequences.push(seq),
            Err(e) => log::warn!("skipping sequence: {e}"),
        }
    }
    Ok(Dataset {
        class_names,
        sequences,
    })
}

/// Reads `dir/manifest.toml` and loads the dataset it describes.
pub fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::read(&dir.join(MANIFEST_FILE))?;
    load_dataset(&manifest, dir)
}

/// Per-dimension standardization fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(dataset: &Dataset) -> Self {
        let d = dataset.feature_dim();
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut count = 0usize;
        for seq in &dataset.sequences {
            for t in 0..seq.len() {
                for (k, &v) in seq.features().row(t).iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
            }
            count += seq.len();
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n - m * m).max(0.0);
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, dataset: &Dataset) -> Result<Dataset> {
        let sequences = dataset
            .sequences
            .iter()
            .map(|seq| {
                let mut f = seq.features().clone();
                for t in 0..f.rows() {
                    for (k, v) in f.row_mut(t).iter_mut().enumerate() {
                        *v = (*v - self.mean[k]) / self.std[k];
                    }
                }
                LabeledSequence::new(f, seq.labels().to_vec(), seq.id())
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            class_names: dataset.class_names.clone(),
            sequences,
        })
    }
}
