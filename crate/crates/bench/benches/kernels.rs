use std::rc::Rc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dynembed_bench::{random_graph, random_matrix, random_scores};
use dynembed_core::autodiff::{Tape, Tensor};
use dynembed_core::eval::{auc, average_precision};
use dynembed_core::graph::symmetric_normalize;
use dynembed_core::models::{step_dyn_gcn, ModelState};
use dynembed_core::norms::{feature_norm_values, NormKind};
use dynembed_core::training::bce_loss;
use dynembed_core::Framework;

fn bench_spmm(c: &mut Criterion) {
    let mut group = c.benchmark_group("spmm");
    for &n in &[1_000usize, 4_000] {
        let adj = symmetric_normalize(&random_graph(n, 8.0, 1));
        let x = random_matrix(n, 32, 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| std::hint::black_box(adj.spmm(&x).unwrap()))
        });
    }
    group.finish();
}

fn bench_feature_norm(c: &mut Criterion) {
    let mut group = c.benchmark_group("feature_norm_values");
    for &n in &[10_000usize, 40_000] {
        let base = random_matrix(n, 32, 3);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| {
                let mut data = base.data.clone();
                feature_norm_values(&mut data, n, 32);
                std::hint::black_box(data)
            })
        });
    }
    group.finish();
}

fn bench_training_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("dyn_gcn_step_with_backward");
    for &n in &[500usize, 2_000] {
        let snapshot = random_graph(n, 8.0, 4);
        let adj = Rc::new(symmetric_normalize(&snapshot));
        let pos: Vec<(usize, usize)> = snapshot.edges.iter().map(|&(s, d, _)| (s, d)).collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut state =
                ModelState::new(Framework::DynGcn, 32, 0.25, NormKind::FeatureNorm, n, &mut rng)
                    .unwrap();
            let params = state.parameters();
            b.iter(|| {
                let mut tape = Tape::new();
                state.reset_hidden();
                let z = step_dyn_gcn(&mut state, &mut tape, &adj, true, &mut rng).unwrap();
                let loss = bce_loss(&mut tape, &z, &pos, &pos, 1.0).unwrap();
                tape.backward(&loss).unwrap();
                for p in &params {
                    p.zero_grad();
                }
                std::hint::black_box(loss.scalar().unwrap())
            })
        });
    }
    group.finish();
}

fn bench_metrics(c: &mut Criterion) {
    let mut group = c.benchmark_group("ranking_metrics");
    for &n in &[1_000usize, 10_000] {
        let pos = random_scores(n, 6);
        let neg = random_scores(n, 7);
        group.bench_with_input(BenchmarkId::new("auc", n), &n, |b, _| {
            b.iter(|| std::hint::black_box(auc(&pos, &neg).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("average_precision", n), &n, |b, _| {
            b.iter(|| std::hint::black_box(average_precision(&pos, &neg).unwrap()))
        });
    }
    group.finish();
}

fn bench_tensor_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("tape_matmul");
    for &n in &[1_000usize, 4_000] {
        let a = random_matrix(n, 32, 8);
        let w = random_matrix(32, 32, 9);
        let at = Tensor::from_matrix(&a);
        let wt = Tensor::from_matrix(&w);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                std::hint::black_box(tape.matmul(&at, &wt).unwrap())
            })
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_spmm,
    bench_feature_norm,
    bench_training_step,
    bench_metrics,
    bench_tensor_matmul
);
criterion_main!(benches);
