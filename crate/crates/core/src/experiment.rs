//! The desk-scale ablation: synthetic data, a fixed train/test split, and
//! every (variant, progress loss, seed) cell trained and scored.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, Dataset, Standardizer, SyntheticConfig};
use crate::error::{Error, Result};
use crate::grammar::TaskGrammar;
use crate::losses::ProgressLossKind;
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{parse_variant, ModelConfig};
use crate::nn::AdamConfig;
use crate::sampling::SamplerConfig;
use crate::train::{train, TrainConfig};

/// Data, model and optimizer settings for one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub synthetic: SyntheticConfig,
    /// Sequences (from the end, by id) held out for testing.
    pub test_sequences: usize,
    /// Standardise features with training-split statistics.
    pub standardize: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    /// 48 generated sequences split 40/8, clips of 10 frames.
    fn default() -> Self {
        Self {
            synthetic: SyntheticConfig::default(),
            test_sequences: 8,
            standardize: false,
            model: ModelConfig::default(),
            train: TrainConfig {
                epochs: 10,
                adam: AdamConfig {
                    learning_rate: 1e-3,
                    ..AdamConfig::default()
                },
                sampler: SamplerConfig {
                    max_stride: Some(1),
                    ..SamplerConfig::default()
                },
                ..TrainConfig::default()
            },
        }
    }
}

impl ExperimentConfig {
    /// Generates the dataset and splits off the test sequences.
    pub fn datasets(&self, grammar: &TaskGrammar) -> Result<(Dataset, Dataset)> {
        let (train_set, test_set, _) = self.split(generate_dataset(grammar, &self.synthetic)?)?;
        Ok((train_set, test_set))
    }

    /// Holds out the last `test_sequences` sequences and, if configured,
    /// standardises both splits with training statistics, which are
    /// returned so unseen data can be treated the same way.
    pub fn split(&self, data: Dataset) -> Result<(Dataset, Dataset, Option<Standardizer>)> {
        if self.test_sequences >= data.sequences.len() {
            return Err(Error::Config(format!(
                "{} test sequences leave nothing to train on out of {}",
                self.test_sequences,
                data.sequences.len()
            )));
        }
        let (train_set, test_set) = data.split_tail(self.test_sequences);
        train_set.ensure_disjoint(&test_set)?;
        if !self.standardize {
            return Ok((train_set, test_set, None));
        }
        let s = Standardizer::fit(&train_set);
        Ok((s.apply(&train_set)?, s.apply(&test_set)?, Some(s)))
    }

    /// The model configuration for one ablation cell.
    pub fn model_for(&self, variant: &str, kind: ProgressLossKind, input_dim: usize, classes: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            input_dim,
            num_classes: classes,
            granularities: parse_variant(variant)?,
            progress_loss: kind,
            ..self.model.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: String,
    pub progress_loss: ProgressLossKind,
    pub seed: u64,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    fn accuracies(&self, variant: &str, kind: ProgressLossKind) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.variant == variant && c.progress_loss == kind)
            .map(|c| c.report.forecast_accuracy)
            .collect()
    }

    /// Mean forecast accuracy over seeds, if the cell was run.
    pub fn mean_accuracy(&self, variant: &str, kind: ProgressLossKind) -> Option<f64> {
        let v = self.accuracies(variant, kind);
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Mean progress accuracy at granularity `n` over seeds.
    pub fn mean_progress_accuracy(&self, variant: &str, kind: ProgressLossKind, n: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.variant == variant && c.progress_loss == kind)
            .filter_map(|c| c.report.progress_accuracy.get(&n).copied())
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// One row per (variant, loss): mean accuracy, spread over seeds and the
    /// gain over the local-only model trained under the same seeds.
    pub fn to_table(&self) -> String {
        let mut kinds: Vec<ProgressLossKind> = Vec::new();
        let mut variants: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !kinds.contains(&c.progress_loss) {
                kinds.push(c.progress_loss);
            }
            if !variants.contains(&c.variant.as_str()) {
                variants.push(&c.variant);
            }
        }
        let mut s = String::new();
        let _ = writeln!(s, "{:<14} {:<10} {:>9} {:>7} {:>8}", "loss", "model", "accuracy", "std", "delta");
        for &kind in &kinds {
            for &variant in &variants {
                let acc = self.accuracies(variant, kind);
                if acc.is_empty() {
                    continue;
                }
                let mean = acc.iter().sum::<f64>() / acc.len() as f64;
                let std = (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / acc.len() as f64).sqrt();
                let delta = self
                    .mean_accuracy("local", kind)
                    .map_or("-".to_string(), |l| format!("{:+.2}", 100.0 * (mean - l)));
                let _ = writeln!(
                    s,
                    "{:<14} {:<10} {:>8.2}% {:>7.2} {:>8}",
                    kind.label(),
                    variant,
                    100.0 * mean,
                    100.0 * std,
                    delta
                );
            }
        }
        s
    }
}

/// Trains and evaluates every requested cell. The local-only model has no
/// progress loss, so it is trained once per seed and listed under each loss.
pub fn run_ablation(
    exp: &ExperimentConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    variants: &[&str],
    kinds: &[ProgressLossKind],
    seeds: &[u64],
) -> Result<AblationTable> {
    train_set.ensure_disjoint(test_set)?;
    let mut cells = Vec::new();
    for &seed in seeds {
        let mut local_report: Option<MetricsReport> = None;
        for &kind in kinds {
            for &variant in variants {
                let model = exp.model_for(variant, kind, train_set.feature_dim(), train_set.num_classes())?;
                let report = match (&local_report, model.granularities.is_empty()) {
                    (Some(r), true) => r.clone(),
                    _ => {
                        let cfg = TrainConfig {
                            seed,
                            ..exp.train.clone()
                        };
                        let out = train(&model, train_set, &cfg)?;
                        let r = evaluate(&out.best, test_set, &cfg.sampler)?;
                        log::info!(
                            "{} {} seed {seed}: {:.2}%",
                            kind.label(),
                            model.variant_name(),
                            100.0 * r.forecast_accuracy
                        );
                        if model.granularities.is_empty() {
                            local_report = Some(r.clone());
                        }
                        r
                    }
                };
                cells.push(AblationCell {
                    variant: model.variant_name(),
                    progress_loss: kind,
                    seed,
                    report,
                });
            }
        }
    }
    Ok(AblationTable { cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let mut exp = ExperimentConfig::default();
        exp.model.weights.per_granularity.insert(10, 0.5);
        exp.train.checkpoint_dir = Some("runs/x".into());
        let text = toml::to_string(&exp).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, exp);
        let partial: ExperimentConfig = toml::from_str("[train]\nepochs = 3\n").unwrap();
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.test_sequences, 8);
    }

    #[test]
    fn split_standardises_with_training_statistics() {
        let exp = ExperimentConfig {
            synthetic: SyntheticConfig {
                sequences: 4,
                feature_dim: 3,
                ..SyntheticConfig::default()
            },
            test_sequences: 1,
            standardize: true,
            ..ExperimentConfig::default()
        };
        let (tr, te) = exp.datasets(&TaskGrammar::ikea_default()).unwrap();
        assert_eq!((tr.sequences.len(), te.sequences.len()), (3, 1));
        let rows: Vec<&[f64]> = tr.sequences.iter().flat_map(|s| (0..s.len()).map(move |r| s.features().row(r))).collect();
        let mean = rows.iter().map(|r| r[0]).sum::<f64>() / rows.len() as f64;
        assert!(mean.abs() < 1e-3, "{mean}");
        assert!(tr.ensure_disjoint(&tr).is_err());
        assert!(ExperimentConfig { test_sequences: 4, ..exp }.datasets(&TaskGrammar::ikea_default()).is_err());
    }

    #[test]
    fn small_ablation_reuses_the_local_model() {
        let exp = ExperimentConfig {
            synthetic: SyntheticConfig {
                sequences: 5,
                feature_dim: 6,
                ..SyntheticConfig::default()
            },
            test_sequences: 1,
            standardize: false,
            model: ModelConfig {
                hidden_size: 4,
                feature_len: 5,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                epochs: 1,
                batches_per_epoch: 2,
                batch_size: 4,
                ..ExperimentConfig::default().train
            },
        };
        let (tr, te) = exp.datasets(&TaskGrammar::ikea_default()).unwrap();
        let kinds = [ProgressLossKind::CrossEntropy, ProgressLossKind::CpLoss];
        let t = run_ablation(&exp, &tr, &te, &["local", "+5"], &kinds, &[4]).unwrap();
        assert_eq!(t.cells.len(), 4);
        assert_eq!(t.cells[0].report, t.cells[2].report);
        let table = t.to_table();
        assert_eq!(table.lines().count(), 5);
        assert!(table.lines().nth(1).unwrap().trim_end().ends_with("+0.00"));
    }
}
