use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use importance_bench::{clip, noise};
use importance_core::candle::{DType, Device, Tensor};
use importance_core::dataset::compute_flow;
use importance_core::metrics::average_precision;
use importance_core::ofe::roi_features;
use importance_core::{ImportanceModel, ModelConfig};

fn forward(c: &mut Criterion) {
    let cfg = ModelConfig::micro();
    let model = ImportanceModel::new(&cfg, DType::F32, 0).unwrap();
    let mut group = c.benchmark_group("forward_micro");
    group.sample_size(10);
    for n in [1, 5, 12] {
        let sample = clip(&cfg, n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &sample, |b, s| {
            b.iter(|| model.predict(black_box(s)).unwrap())
        });
    }
    group.finish();
}

fn ap(c: &mut Criterion) {
    let n = 10_000;
    let scores: Vec<f64> = noise(n, 7).into_iter().map(f64::from).collect();
    let labels: Vec<bool> = noise(n, 8).into_iter().map(|v| v > 0.6).collect();
    c.bench_function("average_precision_10k", |b| {
        b.iter(|| average_precision(black_box(&scores), black_box(&labels)).unwrap())
    });
}

fn flow(c: &mut Criterion) {
    let frames = Tensor::from_vec(noise(4 * 3 * 64 * 64, 9), (4, 3, 64, 64), &Device::Cpu)
        .unwrap()
        .affine(0.5, 0.5)
        .unwrap();
    let mut group = c.benchmark_group("flow");
    group.sample_size(10);
    group.bench_function("4x64x64", |b| b.iter(|| compute_flow(black_box(&frames), 4.0).unwrap()));
    group.finish();
}

fn roi(c: &mut Criterion) {
    let cfg = ModelConfig::micro();
    let sample = clip(&cfg, 12);
    let maps = Tensor::from_vec(noise(4 * 64 * 16 * 16, 10), (4, 64, 16, 16), &Device::Cpu).unwrap();
    c.bench_function("roi_pool_12_objects", |b| {
        b.iter(|| roi_features(black_box(&maps), &sample.boxes, cfg.image_size, cfg.roi_size).unwrap())
    });
}

criterion_group!(benches, forward, ap, flow, roi);
criterion_main!(benches);
