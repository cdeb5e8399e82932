//! Sequential vs rayon row-parallel kernels and a full backbone forward.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fedside::backbone::{build, BackboneConfig, TokenBatch};
use fedside::parallel::{par, seq};

fn matrix(rows: usize, cols: usize, salt: u64) -> Vec<f64> {
    (0..rows * cols)
        .map(|i| ((i as u64).wrapping_mul(2654435761).wrapping_add(salt) % 1000) as f64 / 1000.0 - 0.5)
        .collect()
}

fn row_product(a: &[f64], b: &[f64], n: usize, i: usize) -> Vec<f64> {
    let row = &a[i * n..(i + 1) * n];
    (0..n).map(|j| (0..n).map(|k| row[k] * b[k * n + j]).sum()).collect()
}

fn matmul_rows(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_rows");
    for n in [64, 192] {
        let a = matrix(n, n, 1);
        let b = matrix(n, n, 2);
        group.bench_with_input(BenchmarkId::new("sequential", n), &n, |bench, &n| {
            bench.iter(|| black_box(seq::map(n, |i| row_product(&a, &b, n, i))))
        });
        group.bench_with_input(BenchmarkId::new("rayon", n), &n, |bench, &n| {
            bench.iter(|| black_box(par::map(n, |i| row_product(&a, &b, n, i))))
        });
    }
    group.finish();
}

fn backbone_forward(c: &mut Criterion) {
    let backbone = build(&BackboneConfig::desk("bench", 4, 64, 64, 4)).expect("valid config");
    let rows: Vec<Vec<u32>> = (0..16).map(|r| (0..16).map(|t| ((r * 7 + t * 3) % 64) as u32).collect()).collect();
    let refs: Vec<&[u32]> = rows.iter().map(Vec::as_slice).collect();
    let tokens = TokenBatch::new(&refs).expect("rectangular batch");
    c.bench_function("backbone_forward_16x16", |bench| {
        bench.iter(|| black_box(backbone.logits(&tokens).expect("forward")))
    });
}

criterion_group!(benches, matmul_rows, backbone_forward);
criterion_main!(benches);
