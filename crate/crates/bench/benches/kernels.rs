use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fusionreg::graph::Graph;
use fusionreg::train::{train_step, StepOptions};
use fusionreg::warpcore::{backward_warp, bidirectional_blend, correlation_layer};
use fusionreg::Shape;
use fusionreg_bench::{desk_step_inputs, model, uniform, warp_inputs};
use std::hint::black_box;

fn warps(c: &mut Criterion) {
    let mut group = c.benchmark_group("warp");
    for side in [64, 256] {
        let (x, phi, m) = warp_inputs(side, 3).unwrap();
        group.bench_with_input(BenchmarkId::new("backward", side), &side, |b, _| {
            b.iter(|| backward_warp(black_box(&x), black_box(&phi)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("blend", side), &side, |b, _| {
            b.iter(|| bidirectional_blend(black_box(&x), black_box(&phi), black_box(&m)).unwrap())
        });
    }
    group.finish();
}

fn correlation(c: &mut Criterion) {
    let mut group = c.benchmark_group("correlation");
    for channels in [8, 32] {
        let s = Shape::new(1, channels, 64, 64);
        let (a, b) = (uniform(4, s, -1.0, 1.0), uniform(5, s, -1.0, 1.0));
        group.bench_with_input(BenchmarkId::new("p1", channels), &channels, |bench, _| {
            bench.iter(|| correlation_layer(black_box(&a), black_box(&b), 1).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("p1_with_backward", channels), &channels, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (va, vb) = (g.leaf(a.clone()), g.leaf(b.clone()));
                let v = fusionreg::warpcore::correlation(&mut g, va, vb, 1).unwrap();
                let loss = g.sum(v);
                black_box(g.backward(loss));
            })
        });
    }
    group.finish();
}

fn network(c: &mut Criterion) {
    let mut group = c.benchmark_group("network");
    group.sample_size(10);
    let m = model(8).unwrap();
    let s = Shape::new(1, 3, 64, 64);
    let (vi, ir, f) = (uniform(6, s, 0.0, 1.0), uniform(7, s, 0.0, 1.0), uniform(8, s, 0.0, 1.0));
    group.bench_function("forward_64", |b| b.iter(|| m.forward(black_box(&vi), &ir, &f).unwrap()));
    let (mut state, batch, cfg) = desk_step_inputs(4).unwrap();
    let opts = StepOptions {
        weights: cfg.loss_weights,
        lr: cfg.lr_start,
        grad_clip: cfg.grad_clip,
    };
    group.bench_function("desk_train_step", |b| b.iter(|| train_step(&mut state, &batch, &opts).unwrap()));
    group.finish();
}

criterion_group!(benches, warps, correlation, network);
criterion_main!(benches);
