use std::hint::black_box;

use cabilstm::extractor::ExtractorConfig;
use cabilstm::lstm::{lstm_step, LstmCellParams, LstmState};
use cabilstm::ops::{conv2d, conv2d_backward};
use cabilstm::{ConvSpec, Model, ModelConfig, Tensor};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("conv2d");
    for (size, cin, cout, dilation) in [(64, 3, 8, 1), (32, 8, 16, 1), (16, 16, 32, 2)] {
        let input = Tensor::uniform(&[size, size, cin], 1.0, &mut rng);
        let kernel = Tensor::uniform(&[3, 3, cin, cout], 0.5, &mut rng);
        let spec = ConvSpec::same_3x3(dilation);
        let label = format!("{size}x{size}x{cin}->{cout} d{dilation}");
        group.bench_function(format!("forward {label}"), |b| {
            b.iter(|| conv2d(black_box(&input), black_box(&kernel), spec).unwrap())
        });
        let out = conv2d(&input, &kernel, spec).unwrap();
        let grad = Tensor::uniform(out.shape(), 1.0, &mut rng);
        group.bench_function(format!("backward {label}"), |b| {
            b.iter(|| conv2d_backward(black_box(&input), black_box(&kernel), spec, black_box(&grad)).unwrap())
        });
    }
    group.finish();
}

fn lstm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("lstm_step");
    for (hidden, input) in [(64, 512), (64, 2048)] {
        let params = LstmCellParams::init(hidden, input, &mut rng);
        let v = Tensor::uniform(&[input], 1.0, &mut rng);
        let prev = LstmState::zeros(hidden);
        group.bench_function(format!("h{hidden} in{input}"), |b| {
            b.iter(|| lstm_step(black_box(&params), black_box(&v), black_box(&prev)).unwrap())
        });
    }
    group.finish();
}

fn model(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut group = c.benchmark_group("model");
    group.sample_size(20);
    for (name, extractor, classes) in [
        ("desk 64px", ExtractorConfig::desk(), 17),
        (
            "small 32px",
            ExtractorConfig::from_filters(&[(1, 4), (1, 8), (1, 16)], &[true, true, false], 32),
            6,
        ),
    ] {
        let size = extractor.input_size;
        let model = Model::init(ModelConfig::new(extractor, 64, classes), 0).unwrap();
        let image = Tensor::uniform(&[size, size, 3], 1.0, &mut rng).map(|v| v.abs());
        let target: Vec<f64> = (0..classes).map(|l| (l % 2) as f64).collect();
        group.bench_function(format!("predict {name}"), |b| {
            b.iter(|| model.predict(black_box(&image)).unwrap())
        });
        group.bench_function(format!("loss+grads {name}"), |b| {
            b.iter(|| model.loss_and_grads(black_box(&image), &target, 1.0).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, conv, lstm, model);
criterion_main!(benches);
