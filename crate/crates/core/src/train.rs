//! Mini-batch training with Adam, per-epoch checkpoints and
//! best-by-validation model selection.

use std::collections::BTreeSet;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sequence_rng, Dataset};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::model::{save_checkpoint, CombinedModelParams, ForecastSample, LossBreakdown, ModelConfig};
use crate::nn::{clip_global_norm, AdamConfig, AdamState, Mode, Parameters};
use crate::sampling::{balanced_batch, ClipIndex, SamplerConfig};

/// Samples per gradient work unit. Fixed so the summation order, and
/// therefore every bit of the result, does not depend on the thread count.
const CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Global-norm gradient clipping; `None` disables it.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Share of training sequences (by id) held out for model selection.
    pub validation_fraction: f64,
    /// Where `last.ckpt` and `best.ckpt` go each epoch.
    pub checkpoint_dir: Option<PathBuf>,
    pub sampler: SamplerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batches_per_epoch: 100,
            batch_size: 32,
            adam: AdamConfig::default(),
            clip_norm: Some(5.0),
            seed: 0,
            validation_fraction: 0.1,
            checkpoint_dir: None,
            sampler: SamplerConfig::default(),
        }
    }
}

/// One row of the loss history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub term: String,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: CombinedModelParams,
    /// Best validation forecast accuracy; the last model without validation.
    pub best: CombinedModelParams,
    pub best_epoch: usize,
    pub history: Vec<LossRecord>,
    /// `(epoch, validation forecast accuracy)`.
    pub validation: Vec<(usize, f64)>,
    pub validation_ids: Vec<String>,
}

/// CSV with header `step,term,value`.
pub fn history_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("step,term,value\n");
    for r in history {
        s.push_str(&format!("{},{},{:e}\n", r.step, r.term, r.value));
    }
    s
}

fn validation_split(dataset: &Dataset, fraction: f64) -> (Dataset, Dataset) {
    let count = (dataset.sequences.len() as f64 * fraction).round() as usize;
    let count = count.min(dataset.sequences.len().saturating_sub(1));
    dataset.split_tail(count)
}

/// Mean loss and gradient over a batch.
fn batch_gradient(
    params: &CombinedModelParams,
    batch: &[ForecastSample],
    seed: u64,
    step: usize,
) -> Result<(LossBreakdown, CombinedModelParams)> {
    let partial = batch
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut loss = LossBreakdown::default();
            let mut grads = params.zeros_like();
            for (j, sample) in chunk.iter().enumerate() {
                let mut rng = sequence_rng(seed ^ 0x5eed_d20f, ((step as u64) << 20) | (ci * CHUNK + j) as u64);
                let (l, g) = params.loss_and_gradients(sample, &mut Mode::Train(&mut rng))?;
                loss.add(&l);
                grads.accumulate(&g);
            }
            Ok((loss, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut parts = partial.into_iter();
    let (mut loss, mut grads) = parts.next().expect("non-empty batch");
    for (l, g) in parts {
        loss.add(&l);
        grads.accumulate(&g);
    }
    let inv = 1.0 / batch.len() as f64;
    loss.scale(inv);
    grads.scale(inv);
    Ok((loss, grads))
}

fn divergence_dump(batch: &[ForecastSample], loss: &LossBreakdown) -> String {
    let clips: Vec<String> = batch
        .iter()
        .map(|s| {
            format!(
                "{}@{:?}->{}",
                s.sequence_id,
                s.clip_frame_indices.first().zip(s.clip_frame_indices.last()),
                s.next_action
            )
        })
        .collect();
    format!("losses {:?}; last batch [{}]", loss.terms(), clips.join(", "))
}

/// Trains a model on `dataset` (the training split; a validation share is
/// carved out of it by sequence id).
pub fn train(model_cfg: &ModelConfig, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if dataset.sequences.is_empty() {
        return Err(Error::Domain("empty training split".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let sampler = SamplerConfig {
        granularities: model_cfg.granularities.clone(),
        ..cfg.sampler.clone()
    };
    let (train_set, val_set) = validation_split(dataset, cfg.validation_fraction);
    let train_ids: BTreeSet<&str> = train_set.sequences.iter().map(|s| s.id()).collect();
    assert!(
        val_set.sequences.iter().all(|s| !train_ids.contains(s.id())),
        "validation overlaps training"
    );
    let index = ClipIndex::new(&train_set, &sampler)?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = CombinedModelParams::new(model_cfg.clone(), &mut init_rng)?;
    let mut adam = AdamState::new(&params, cfg.adam);
    let mut sample_rng = sequence_rng(cfg.seed, 0xC11F);

    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut history = Vec::new();
    let mut validation = Vec::new();
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_acc = f64::NEG_INFINITY;
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        for _ in 0..cfg.batches_per_epoch {
            let batch = balanced_batch(&train_set, &index, &sampler, cfg.batch_size, &mut sample_rng)?;
            let (loss, mut grads) = batch_gradient(&params, &batch, cfg.seed, step)?;
            if !loss.is_finite() || !grads.is_finite() {
                let detail = divergence_dump(&batch, &loss);
                if let Some(dir) = &cfg.checkpoint_dir {
                    let path = dir.join("divergence.txt");
                    std::fs::write(&path, &detail).map_err(|e| Error::io(&path, e))?;
                }
                return Err(Error::Diverged { step, detail });
            }
            if let Some(max) = cfg.clip_norm {
                clip_global_norm(&mut grads, max);
            }
            adam.step(&mut params, &grads);
            for (term, value) in loss.terms() {
                history.push(LossRecord { step, term, value });
            }
            step += 1;
        }

        let acc = if val_set.sequences.is_empty() {
            None
        } else {
            Some(evaluate(&params, &val_set, &sampler)?.forecast_accuracy)
        };
        if let Some(a) = acc {
            validation.push((epoch, a));
            log::info!("epoch {epoch}: validation accuracy {:.2}%", 100.0 * a);
        }
        let improved = acc.is_none_or(|a| a > best_acc);
        if improved {
            best_acc = acc.unwrap_or(best_acc);
            best = params.clone();
            best_epoch = epoch;
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            save_checkpoint(&params, &dir.join("last.ckpt"))?;
            if improved {
                save_checkpoint(&best, &dir.join("best.ckpt"))?;
            }
        }
    }

    Ok(TrainOutcome {
        last: params,
        best,
        best_epoch,
        history,
        validation,
        validation_ids: val_set.sequences.iter().map(|s| s.id().to_string()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SyntheticConfig};
    use crate::grammar::TaskGrammar;
    use crate::losses::ProgressLossKind;
    use crate::model::{parse_variant, ABLATION_VARIANTS};
    use crate::nn::AdamConfig;

    fn toy_grammar() -> TaskGrammar {
        TaskGrammar {
            actions: vec!["a".into(), "b".into(), "c".into(), "d".into()],
            instances: vec![0, 1, 2, 3],
            precedence: vec![(0, 1), (1, 2), (2, 3)],
            duration_range: vec![(12, 20); 4],
            interleavable_groups: vec![],
        }
    }

    fn toy_dataset(sequences: usize) -> Dataset {
        let cfg = SyntheticConfig {
            sequences,
            feature_dim: 6,
            class_separation: 3.0,
            noise_std: 0.3,
            smoothing_window: 3,
            ..SyntheticConfig::default()
        };
        generate_dataset(&toy_grammar(), &cfg).unwrap()
    }

    fn toy_model(granularities: Vec<usize>) -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            num_classes: 4,
            hidden_size: 8,
            feature_len: 10,
            granularities,
            ..ModelConfig::default()
        }
    }

    fn toy_train(epochs: usize, batches: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batches_per_epoch: batches,
            batch_size: 8,
            adam: AdamConfig {
                learning_rate: 1e-2,
                ..AdamConfig::default()
            },
            sampler: SamplerConfig {
                clip_len: 5,
                ..SamplerConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn mean_total(history: &[LossRecord], steps: std::ops::Range<usize>) -> f64 {
        let v: Vec<f64> = history
            .iter()
            .filter(|r| r.term == "total" && steps.contains(&r.step))
            .map(|r| r.value)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn loss_halves_on_a_toy_dataset() {
        let out = train(&toy_model(vec![5]), &toy_dataset(2), &toy_train(2, 100)).unwrap();
        let first = mean_total(&out.history, 0..10);
        let last = mean_total(&out.history, 190..200);
        assert!(last < 0.5 * first, "loss {first} -> {last}");
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let data = toy_dataset(4);
        let cfg = toy_train(2, 5);
        let a = train(&toy_model(vec![3, 5]), &data, &cfg).unwrap();
        let b = train(&toy_model(vec![3, 5]), &data, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.validation, b.validation);
        assert_eq!(a.last.tensors(), b.last.tensors());
        let c = train(&toy_model(vec![3, 5]), &data, &TrainConfig { seed: 9, ..cfg }).unwrap();
        assert_ne!(a.history, c.history);
    }

    #[test]
    fn every_ablation_variant_trains() {
        let data = toy_dataset(3);
        for kind in [ProgressLossKind::CrossEntropy, ProgressLossKind::CpLoss, ProgressLossKind::L2] {
            for v in ABLATION_VARIANTS {
                let model = ModelConfig {
                    progress_loss: kind,
                    ..toy_model(parse_variant(v).unwrap())
                };
                let out = train(&model, &data, &toy_train(1, 3)).unwrap();
                assert_eq!(out.history.iter().filter(|r| r.term == "total").count(), 3);
                assert!(out.history.iter().all(|r| r.value.is_finite()));
            }
        }
    }

    #[test]
    fn validation_split_is_disjoint_and_checkpoints_exist() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy_dataset(10);
        let cfg = TrainConfig {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..toy_train(2, 2)
        };
        let out = train(&toy_model(vec![5]), &data, &cfg).unwrap();
        assert_eq!(out.validation_ids, vec!["seq-0009".to_string()]);
        assert_eq!(out.validation.len(), 2);
        assert!(dir.path().join("last.ckpt").exists());
        assert!(dir.path().join("best.ckpt").exists());
        let best = crate::model::load_checkpoint(&dir.path().join("best.ckpt")).unwrap();
        assert_eq!(best.tensors(), out.best.tensors());
    }

    #[test]
    fn divergence_is_reported_with_the_batch() {
        let cfg = TrainConfig {
            adam: AdamConfig {
                learning_rate: f64::INFINITY,
                ..AdamConfig::default()
            },
            ..toy_train(1, 3)
        };
        match train(&toy_model(vec![5]), &toy_dataset(2), &cfg) {
            Err(Error::Diverged { step, detail }) => {
                assert!(step >= 1);
                assert!(detail.contains("seq-"));
            }
            other => panic!("expected divergence, got {:?}", other.map(|o| o.best_epoch)),
        }
    }

    #[test]
    fn history_csv_has_one_row_per_record() {
        let rows = vec![
            LossRecord { step: 0, term: "fused".into(), value: 1.5 },
            LossRecord { step: 0, term: "total".into(), value: 2.0 },
        ];
        let csv = history_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("step,term,value\n0,fused,"));
    }
}
