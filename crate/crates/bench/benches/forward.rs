use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use faultclip_bench::fixture;
use faultclip_core::{evaluate_accuracy, profile};
use std::hint::black_box;

fn forward(c: &mut Criterion) {
    let (model, samples) = fixture(64);
    let net = model.decode();
    c.bench_function("forward/one_image", |b| b.iter(|| net.forward(black_box(&samples[0].image)).unwrap()));

    let mut g = c.benchmark_group("forward");
    g.throughput(Throughput::Elements(samples.len() as u64));
    g.bench_function("accuracy_64", |b| b.iter(|| evaluate_accuracy(&model, None, black_box(&samples)).unwrap()));
    g.bench_function("profile_64", |b| b.iter(|| profile(&model, black_box(&samples)).unwrap()));
    g.finish();
}

criterion_group!(benches, forward);
criterion_main!(benches);
