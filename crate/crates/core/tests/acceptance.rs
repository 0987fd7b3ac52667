//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! The ablation criteria train 9 desk-scale models and take several minutes
//! on one core; everything else finishes in seconds.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use taskcast_core::data::{generate_dataset, load_dataset_dir, save_dataset, SyntheticConfig};
use taskcast_core::experiment::{run_ablation, AblationTable, ExperimentConfig};
use taskcast_core::gradcheck::{grad_check, relative_error, Component, FD_STEP};
use taskcast_core::grammar::TaskGrammar;
use taskcast_core::losses::{
    cdf_distance, cp_loss, cp_loss_truncated_gradient, l2_progress_loss, ProgressBin, ProgressLossKind,
};
use taskcast_core::metrics::{evaluate, MetricsReport};
use taskcast_core::model::{load_checkpoint, save_checkpoint, ModelConfig};
use taskcast_core::nn::Parameters;
use taskcast_core::sampling::{ClipIndex, SamplerConfig};
use taskcast_core::train::{train, TrainConfig};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn central_difference(logits: &[f64], target: ProgressBin) -> Vec<f64> {
    (0..logits.len())
        .map(|k| {
            let mut a = logits.to_vec();
            let mut b = logits.to_vec();
            a[k] += FD_STEP;
            b[k] -= FD_STEP;
            (cp_loss(&a, target).unwrap().0 - cp_loss(&b, target).unwrap().0) / (2.0 * FD_STEP)
        })
        .collect()
}

fn cp_loss_gradient_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst_exact, mut best_truncated) = (0.0f64, f64::INFINITY);
    for _ in 0..100 {
        let n = [5, 10, 20][rng.random_range(0..3)];
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let target = ProgressBin::new(rng.random_range(0..n), n).unwrap();
        let numeric = central_difference(&logits, target);
        let exact = cp_loss(&logits, target).unwrap().1;
        let truncated = cp_loss_truncated_gradient(&logits, target).unwrap();
        worst_exact = worst_exact.max(relative_error(&exact, &numeric));
        best_truncated = best_truncated.min(relative_error(&truncated, &numeric));
    }
    outcome(
        worst_exact < 1e-5 && best_truncated >= 1e-5,
        format!("exact max rel err {worst_exact:.2e} (< 1e-5); truncated min rel err {best_truncated:.2e} (must fail)"),
    )
}

fn bptt_oracle() -> Outcome {
    let r = grad_check(Component::Combined, 6, 1e-4, 12);
    outcome(
        r.passed,
        format!("combined model, D=4 clip 5 hidden 3 C=3: max rel err {:.2e} (< 1e-4)", r.max_relative_error),
    )
}

fn cdf_identity() -> Outcome {
    let mut mismatches = 0;
    let mut cases = 0;
    for n in 1..=50 {
        for b in 0..n {
            let p = ProgressBin::new(b, n).unwrap().one_hot();
            for g in 0..n {
                let d = cdf_distance(p.as_slice(), ProgressBin::new(g, n).unwrap()).unwrap();
                cases += 1;
                if d != b.abs_diff(g) as f64 {
                    mismatches += 1;
                }
            }
        }
    }
    outcome(mismatches == 0, format!("{cases} (b, g) pairs, {mismatches} mismatches"))
}

fn l2_bias() -> Outcome {
    let ratio = l2_progress_loss(9.0, 1.0).0 / l2_progress_loss(4.0, 1.0).0;
    outcome((ratio - 64.0 / 9.0).abs() < 1e-12, format!("L(9,1)/L(4,1) = {ratio:.4}"))
}

fn desk_scale_ablation(exp: &ExperimentConfig) -> (AblationTable, f64) {
    let t = Instant::now();
    let (train_set, test_set) = exp.datasets(&TaskGrammar::ikea_default()).unwrap();
    assert_eq!((train_set.sequences.len(), test_set.sequences.len()), (40, 8));
    let table = run_ablation(
        exp,
        &train_set,
        &test_set,
        &["local", "+5+10+20"],
        &[ProgressLossKind::CrossEntropy, ProgressLossKind::CpLoss],
        &[1, 2, 3],
    )
    .unwrap();
    (table, t.elapsed().as_secs_f64())
}

fn forecast_gain(table: &AblationTable, seconds: f64) -> Outcome {
    let mut parts = Vec::new();
    let mut best_gain = f64::NEG_INFINITY;
    for kind in [ProgressLossKind::CrossEntropy, ProgressLossKind::CpLoss] {
        let local = table.mean_accuracy("local", kind).unwrap();
        let full = table.mean_accuracy("+5+10+20", kind).unwrap();
        best_gain = best_gain.max(full - local);
        parts.push(format!("{} {:.1}% vs local {:.1}%", kind.label(), 100.0 * full, 100.0 * local));
    }
    outcome(
        best_gain >= 0.03,
        format!("{}; best gain {:+.1} pp (>= 3), {seconds:.0}s", parts.join(", "), 100.0 * best_gain),
    )
}

fn progress_learnability(table: &AblationTable) -> Outcome {
    let accs: Vec<(ProgressLossKind, f64)> = [ProgressLossKind::CrossEntropy, ProgressLossKind::CpLoss]
        .into_iter()
        .map(|k| (k, table.mean_progress_accuracy("+5+10+20", k, 5).unwrap()))
        .collect();
    let mean = accs.iter().map(|a| a.1).sum::<f64>() / accs.len() as f64;
    let detail: Vec<String> = accs.iter().map(|(k, a)| format!("{} {:.1}%", k.label(), 100.0 * a)).collect();
    outcome(
        mean > 0.6,
        format!("5-bin accuracy over all combined runs {:.1}% (> 60%; {})", 100.0 * mean, detail.join(", ")),
    )
}

fn balanced_sampler(exp: &ExperimentConfig) -> Outcome {
    let (train_set, _) = exp.datasets(&TaskGrammar::ikea_default()).unwrap();
    let cfg = SamplerConfig {
        balance_classes: true,
        ..exp.train.sampler.clone()
    };
    let index = ClipIndex::new(&train_set, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let draws = 10_000;
    for _ in 0..draws {
        *counts.entry(index.draw(&train_set, &cfg, &mut rng).unwrap().next_action).or_default() += 1;
    }
    let classes = index.balanced_classes();
    let uniform = draws as f64 / classes.len() as f64;
    let worst = classes
        .iter()
        .map(|c| (counts.get(c).copied().unwrap_or(0) as f64 - uniform).abs() / uniform)
        .fold(0.0f64, f64::max);
    outcome(
        worst <= 0.2 && counts.keys().all(|c| classes.contains(c)),
        format!("{} classes, worst relative deviation {:.1}% (<= 20%)", classes.len(), 100.0 * worst),
    )
}

fn determinism_and_round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let synthetic = SyntheticConfig {
        sequences: 6,
        feature_dim: 8,
        ..SyntheticConfig::default()
    };
    let data = generate_dataset(&TaskGrammar::ikea_default(), &synthetic).unwrap();
    let (train_set, test_set) = data.split_tail(2);
    let model = ModelConfig {
        input_dim: 8,
        hidden_size: 6,
        feature_len: 8,
        progress_loss: ProgressLossKind::CpLoss,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 2,
        batches_per_epoch: 3,
        batch_size: 8,
        seed: 21,
        ..TrainConfig::default()
    };
    let run = || {
        let out = train(&model, &train_set, &cfg).unwrap();
        let report = evaluate(&out.best, &test_set, &cfg.sampler).unwrap();
        (out, report.to_json())
    };
    let (first, metrics_a) = run();
    let (_, metrics_b) = run();
    let metrics_same = metrics_a == metrics_b;

    let path = dir.path().join("model.ckpt");
    save_checkpoint(&first.best, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let ckpt_same = loaded.config == first.best.config
        && loaded
            .tensors()
            .iter()
            .zip(first.best.tensors())
            .all(|(a, b)| a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));

    save_dataset(&data, &dir.path().join("data")).unwrap();
    let reloaded = load_dataset_dir(&dir.path().join("data")).unwrap();
    let data_same = reloaded == data;

    outcome(
        metrics_same && ckpt_same && data_same,
        format!("metrics identical: {metrics_same}, checkpoint bit-exact: {ckpt_same}, dataset bit-exact: {data_same}"),
    )
}

fn metrics_algebra() -> Outcome {
    let names: Vec<String> = (0..4).map(|i| format!("c{i}")).collect();
    // Class 3 never occurs; class 2 is never predicted.
    let pairs = [(0, 0), (0, 1), (1, 1), (1, 1), (1, 0), (2, 0), (2, 1), (0, 0)];
    let r = MetricsReport::from_predictions(names, &pairs).unwrap();
    let rows_ok = r.confusion.counts == vec![vec![2, 1, 0, 0], vec![1, 2, 0, 0], vec![1, 1, 0, 0], vec![0; 4]];
    let acc_ok = r.forecast_accuracy == r.confusion.trace() as f64 / r.confusion.total() as f64
        && (r.forecast_accuracy - 0.5).abs() < 1e-15;
    // Hand values: precision (2/4, 2/4, 0), recall (2/3, 2/3, 0) over classes 0..2.
    let macro_ok = (r.mean_precision - (0.5 + 0.5 + 0.0) / 3.0).abs() < 1e-15
        && (r.mean_recall - (2.0 / 3.0 + 2.0 / 3.0) / 3.0).abs() < 1e-15;
    let sums_ok = (0..4).all(|k| r.confusion.row_sum(k) == r.support[k]);
    outcome(
        rows_ok && acc_ok && macro_ok && sums_ok,
        format!("confusion {rows_ok}, accuracy {acc_ok}, macro averages {macro_ok}, row sums {sums_ok}"),
    )
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let exp = ExperimentConfig::default();
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 cp_loss gradient oracle", cp_loss_gradient_oracle()),
        ("2 BPTT gradient oracle", bptt_oracle()),
        ("3 CDF-distance identity", cdf_identity()),
        ("4 L2 bias ratio", l2_bias()),
    ];
    let (table, seconds) = desk_scale_ablation(&exp);
    println!("{}", table.to_table());
    results.push(("5 progress streams beat local", forecast_gain(&table, seconds)));
    results.push(("6 progress learnability", progress_learnability(&table)));
    results.push(("7 balanced sampler", balanced_sampler(&exp)));
    results.push(("8 determinism and round-trips", determinism_and_round_trips()));
    results.push(("9 metrics algebra", metrics_algebra()));

    let mut failed = 0;
    for (name, o) in &results {
        println!("criterion {name}: {} ({})", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.passed);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
