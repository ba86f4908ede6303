//! Sequential versus parallel execution of a batched forward pass and a
//! short training run.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vecgauge::data::{build_patches, Dataset};
use vecgauge::model::{ModelConfig, VdnModel};
use vecgauge::synth::SynthRanges;
use vecgauge::train::{train, TrainConfig, TrainOutput};
use vecgauge::{ExecMode, Tensor};

const MODES: [ExecMode; 2] = [ExecMode::Sequential, ExecMode::Parallel];

fn forward(c: &mut Criterion) {
    let model = VdnModel::new(ModelConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let data: Vec<f64> = (0..8 * 3 * 128 * 128).map(|_| rng.random_range(0.0..1.0)).collect();
    let batch = Tensor::new(vec![8, 3, 128, 128], data).unwrap();
    let mut group = c.benchmark_group("forward_batch8");
    group.sample_size(10);
    for mode in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &mode| {
            b.iter(|| model.forward(mode, black_box(&batch)).unwrap())
        });
    }
    group.finish();
}

fn train_epoch(c: &mut Criterion) {
    let ds = Dataset::generate(16, 0, &SynthRanges::default(), ExecMode::Sequential).unwrap();
    let samples = build_patches(&ds, 128, ExecMode::Sequential).unwrap();
    let out = TrainOutput { dir: None, meta: None };
    let mut group = c.benchmark_group("train_epoch16");
    group.sample_size(10);
    for mode in MODES {
        let cfg = TrainConfig {
            epochs: 1,
            exec: mode,
            ..TrainConfig::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &cfg, |b, cfg| {
            b.iter(|| {
                let model = VdnModel::new(ModelConfig::default()).unwrap();
                train(model, black_box(&samples), cfg, &out, |_| {}).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, forward, train_epoch);
criterion_main!(benches);
