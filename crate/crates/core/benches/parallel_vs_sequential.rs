//! Single-thread pool versus the default rayon pool on the two data-parallel
//! hot paths: event generation and CNN batch gradients. Build with
//! `--no-default-features` to get the sequential code path everywhere.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nuvision::cnn::{batch_gradient, CnnConfig, CnnModel};
use nuvision::eventgen::{generate_range, DetectorGeometry, GeneratorConfig, RenderPitch};

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let default = rayon::ThreadPoolBuilder::new().build().unwrap();
    let label = format!("pool-{}", default.current_num_threads());
    vec![("sequential".into(), rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()), (label, default)]
}

fn event_generation(c: &mut Criterion) {
    let mut group = c.benchmark_group("generate_16_events");
    group.sample_size(10);
    let cfg = GeneratorConfig::default();
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(&name), |b| {
            b.iter(|| pool.install(|| generate_range(&cfg, 0, 16).unwrap()))
        });
    }
    group.finish();
}

fn cnn_gradients(c: &mut Criterion) {
    let mut group = c.benchmark_group("cnn_batch_gradient_16");
    group.sample_size(10);
    let mut gen = GeneratorConfig::default();
    gen.geometry = DetectorGeometry { crop_size: 128, render_pitch: RenderPitch::Coarse, ..DetectorGeometry::default() };
    let data = generate_range(&gen, 0, 16).unwrap();
    let config = CnnConfig { input_size: 128, ..CnnConfig::default() };
    let model = CnnModel::new(config, 0).unwrap();
    let seeds: Vec<u64> = (0..16).collect();
    let mut grads = vec![0.0f32; model.num_params()];
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(&name), |b| {
            b.iter(|| pool.install(|| batch_gradient(&model, &data, &seeds, &mut grads).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, event_generation, cnn_gradients);
criterion_main!(benches);
