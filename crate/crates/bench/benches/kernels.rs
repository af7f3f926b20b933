use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use entrolab::entropic::EntropicConfig;
use entrolab::numerics::{gaussian_matrix, svd};
use entrolab::trainer::sgd_step;
use entrolab::{ParamVector, Rng};
use entrolab_bench::linear_fixture;

fn bench_svd(c: &mut Criterion) {
    let mut group = c.benchmark_group("svd");
    for n in [8, 32, 64] {
        let m = gaussian_matrix(&mut Rng::new(1), n, n, None).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &m, |b, m| b.iter(|| svd(black_box(m)).unwrap()));
    }
    group.finish();
}

fn bench_batch_gradient(c: &mut Criterion) {
    let mut group = c.benchmark_group("batch_gradient");
    for width in [8, 32] {
        let (net, batch) = linear_fixture(&[16, width, width, 16], 32, 2);
        group.bench_with_input(BenchmarkId::from_parameter(width), &(net, batch), |b, (net, batch)| {
            b.iter(|| net.batch_gradient(black_box(batch)).unwrap())
        });
    }
    group.finish();
}

fn bench_hvp(c: &mut Criterion) {
    let (net, batch) = linear_fixture(&[16, 32, 16], 32, 3);
    let n = net.params().len();
    let dir = ParamVector::new(net.layout(), Rng::new(4).normal_vec(n)).unwrap();
    c.bench_function("hvp", |b| b.iter(|| net.hvp(black_box(&batch), black_box(&dir)).unwrap()));
}

fn bench_sgd_step(c: &mut Criterion) {
    let (net, batch) = linear_fixture(&[16, 32, 16], 32, 5);
    let cfg = EntropicConfig::new(0.01, 1e-3, 32);
    c.bench_function("sgd_step", |b| b.iter(|| sgd_step(black_box(&net), black_box(&batch), &cfg, false).unwrap()));
}

criterion_group!(benches, bench_svd, bench_batch_gradient, bench_hvp, bench_sgd_step);
criterion_main!(benches);
