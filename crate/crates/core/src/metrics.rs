//! Forecast evaluation: accuracy, per-class and macro precision/recall,
//! confusion matrix and progress accuracy per granularity.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::CombinedModelParams;
use crate::sampling::{evaluation_clips, SamplerConfig};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, r: usize) -> usize {
        self.counts[r].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> usize {
        self.counts.iter().map(|row| row[c]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub samples: usize,
    pub forecast_accuracy: f64,
    /// Accuracy of the local stream's own head.
    pub local_head_accuracy: f64,
    /// Zero for classes never predicted.
    pub per_class_precision: Vec<f64>,
    /// Zero for classes without support.
    pub per_class_recall: Vec<f64>,
    pub support: Vec<usize>,
    /// Unweighted means over classes with support.
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub confusion: ConfusionMatrix,
    pub progress_accuracy: BTreeMap<usize, f64>,
}

impl MetricsReport {
    /// Builds a report from `(truth, predicted)` pairs.
    pub fn from_predictions(class_names: Vec<String>, pairs: &[(usize, usize)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Domain("no evaluation samples".into()));
        }
        let c = class_names.len();
        let mut confusion = ConfusionMatrix::new(c);
        for &(t, p) in pairs {
            if t >= c || p >= c {
                return Err(Error::Domain(format!("class index {} outside {c} classes", t.max(p))));
            }
            confusion.record(t, p);
        }
        let support: Vec<usize> = (0..c).map(|k| confusion.row_sum(k)).collect();
        let per_class_precision: Vec<f64> = (0..c)
            .map(|k| {
                let predicted = confusion.col_sum(k);
                if predicted == 0 {
                    0.0
                } else {
                    confusion.counts[k][k] as f64 / predicted as f64
                }
            })
            .collect();
        let per_class_recall: Vec<f64> = (0..c)
            .map(|k| {
                if support[k] == 0 {
                    0.0
                } else {
                    confusion.counts[k][k] as f64 / support[k] as f64
                }
            })
            .collect();
        let present: Vec<usize> = (0..c).filter(|&k| support[k] > 0).collect();
        let mean = |v: &[f64]| present.iter().map(|&k| v[k]).sum::<f64>() / present.len() as f64;
        Ok(Self {
            class_names,
            samples: pairs.len(),
            forecast_accuracy: confusion.trace() as f64 / pairs.len() as f64,
            local_head_accuracy: f64::NAN,
            mean_precision: mean(&per_class_precision),
            mean_recall: mean(&per_class_recall),
            per_class_precision,
            per_class_recall,
            support,
            confusion,
            progress_accuracy: BTreeMap::new(),
        })
    }

    /// Human-readable summary table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "samples            {}", self.samples);
        let _ = writeln!(s, "forecast accuracy  {:.2}%", 100.0 * self.forecast_accuracy);
        let _ = writeln!(s, "local head acc.    {:.2}%", 100.0 * self.local_head_accuracy);
        let _ = writeln!(s, "mean precision     {:.2}%", 100.0 * self.mean_precision);
        let _ = writeln!(s, "mean recall        {:.2}%", 100.0 * self.mean_recall);
        for (n, acc) in &self.progress_accuracy {
            let _ = writeln!(s, "progress@{n:<3}       {:.2}%", 100.0 * acc);
        }
        let width = self.class_names.iter().map(String::len).max().unwrap_or(5).max(5);
        let _ = writeln!(s, "\n{:<width$}  support  precision  recall", "class");
        for (k, name) in self.class_names.iter().enumerate() {
            let _ = writeln!(
                s,
                "{:<width$}  {:>7}  {:>9.3}  {:>6.3}",
                name, self.support[k], self.per_class_precision[k], self.per_class_recall[k]
            );
        }
        let _ = writeln!(s, "\nconfusion (rows: truth, cols: predicted)");
        for row in &self.confusion.counts {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>4}")).collect();
            let _ = writeln!(s, "{}", cells.join(""));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Evaluates `params` on every deterministic evaluation clip of `dataset`.
pub fn evaluate(params: &CombinedModelParams, dataset: &Dataset, cfg: &SamplerConfig) -> Result<MetricsReport> {
    if dataset.sequences.is_empty() {
        return Err(Error::Domain("empty test split".into()));
    }
    let cfg = SamplerConfig {
        granularities: params.config.granularities.clone(),
        ..cfg.clone()
    };
    cfg.validate()?;
    let mut clips = Vec::new();
    for seq in &dataset.sequences {
        clips.extend(evaluation_clips(seq, &cfg)?);
    }
    let predictions = clips
        .par_iter()
        .map(|clip| params.predict(&clip.clip))
        .collect::<Result<Vec<_>>>()?;

    let pairs: Vec<(usize, usize)> = clips
        .iter()
        .zip(&predictions)
        .map(|(c, p)| (c.next_action, p.action))
        .collect();
    let mut report = MetricsReport::from_predictions(dataset.class_names.clone(), &pairs)?;
    let local_hits = clips
        .iter()
        .zip(&predictions)
        .filter(|(c, p)| c.next_action == p.local_action)
        .count();
    report.local_head_accuracy = local_hits as f64 / clips.len() as f64;
    for (i, &n) in params.config.granularities.iter().enumerate() {
        let hits = clips
            .iter()
            .zip(&predictions)
            .filter(|(c, p)| c.progress_bins[&n].bin() == p.progress[i].1)
            .count();
        report.progress_accuracy.insert(n, hits as f64 / clips.len() as f64);
    }
    Ok(report)
}
