use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use faultclip_bench::fixture;
use faultclip_core::{apply_mask, draw_mask, run_sweep, FaultScope, FaultSpec, SweepConfig};
use std::hint::black_box;

fn masks(c: &mut Criterion) {
    let (model, _) = fixture(1);
    let mut g = c.benchmark_group("draw_mask");
    for rate in [1e-5, 1e-3, 1e-1] {
        g.bench_with_input(BenchmarkId::from_parameter(rate), &rate, |b, &rate| {
            let spec = FaultSpec::new(rate, FaultScope::Network, 7, 0);
            b.iter(|| draw_mask(&model, black_box(&spec)).unwrap())
        });
    }
    g.finish();

    let mask = draw_mask(&model, &FaultSpec::new(1e-3, FaultScope::Network, 7, 0)).unwrap();
    c.bench_function("apply_mask/1e-3", |b| b.iter(|| apply_mask(&model, black_box(&mask)).unwrap()));
}

fn sweep(c: &mut Criterion) {
    let (model, samples) = fixture(100);
    let cfg = SweepConfig::new(vec![0.0, 1e-4, 1e-3], 2, FaultScope::Network, 7).unwrap();
    let mut g = c.benchmark_group("sweep");
    g.sample_size(10);
    g.bench_function("3_rates_2_trials_100", |b| b.iter(|| run_sweep(&model, black_box(&cfg), &samples).unwrap()));
    g.finish();
}

criterion_group!(benches, masks, sweep);
criterion_main!(benches);
