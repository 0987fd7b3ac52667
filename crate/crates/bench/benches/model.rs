use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use taskcast_core::losses::{cp_loss, ProgressBin};
use taskcast_core::model::{CombinedModelParams, ForecastSample, ModelConfig};
use taskcast_core::nn::{Mode, StackedLstm};
use taskcast_core::Matrix;

fn clip(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::uniform(rows, cols, 1.0, rng)
}

fn lstm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = StackedLstm::new(64, 32, 2, 0.0, &mut rng);
    let x = clip(10, 64, &mut rng);
    c.bench_function("lstm_forward_l10_d64_h32", |b| {
        b.iter(|| net.forward(black_box(&x), &mut Mode::Eval).unwrap())
    });
    c.bench_function("lstm_forward_backward_l10_d64_h32", |b| {
        b.iter_batched(
            || net.zeros_like(),
            |mut grads| {
                let (h, cache) = net.forward(&x, &mut Mode::Eval).unwrap();
                net.backward(&cache, &h, &mut grads);
                grads
            },
            BatchSize::SmallInput,
        )
    });
}

fn losses(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let logits: Vec<f64> = (0..20).map(|_| rng.random_range(-3.0..3.0)).collect();
    let target = ProgressBin::new(7, 20).unwrap();
    c.bench_function("cp_loss_n20", |b| b.iter(|| cp_loss(black_box(&logits), target).unwrap()));
}

fn combined(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = ModelConfig::default();
    let params = CombinedModelParams::new(cfg.clone(), &mut rng).unwrap();
    let sample = ForecastSample {
        clip: clip(10, cfg.input_dim, &mut rng),
        next_action: 3,
        progress_bins: cfg
            .granularities
            .iter()
            .map(|&n| (n, ProgressBin::new(n / 2, n).unwrap()))
            .collect(),
        sequence_id: "bench".into(),
        clip_frame_indices: (0..10).collect(),
    };
    c.bench_function("combined_loss_and_gradients", |b| {
        b.iter(|| {
            let mut drop_rng = ChaCha8Rng::seed_from_u64(4);
            params
                .loss_and_gradients(black_box(&sample), &mut Mode::Train(&mut drop_rng))
                .unwrap()
        })
    });
}

criterion_group!(benches, lstm, losses, combined);
criterion_main!(benches);
