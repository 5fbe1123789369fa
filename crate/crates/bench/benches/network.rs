use criterion::{criterion_group, criterion_main, Criterion};
use posediff::diffusion::{sample, Denoiser};
use posediff::harness::{loss_and_grads, Stage};
use posediff::losses::LossWeights;
use posediff_bench::desk_fixture;
use std::hint::black_box;

fn network(c: &mut Criterion) {
    let f = desk_fixture();
    let cfg = f.net.config().clone();
    let cond = f.net.prepare(&f.sample.query, &f.sample.templates, 128).unwrap();
    let w = LossWeights::default();
    let mut group = c.benchmark_group("desk_network");
    group.sample_size(10);
    group.bench_function("condition", |b| {
        b.iter(|| f.net.prepare(black_box(&f.sample.query), &f.sample.templates, 128).unwrap())
    });
    group.bench_function("denoise", |b| b.iter(|| f.net.denoise(black_box(&f.noise), 10, &cond).unwrap()));
    group.bench_function("train_step_grads", |b| {
        b.iter(|| loss_and_grads(&f.net, black_box(&f.item), 10, &f.noise, &f.sched, &f.grid, &w).unwrap())
    });
    group.bench_function("sample_20_steps", |b| {
        b.iter(|| sample(&f.net, &cond, &f.sched, cfg.templates, cfg.map_cells(), black_box(0)).unwrap())
    });
    group.finish();
}

criterion_group!(benches, network);
criterion_main!(benches);
