//! Each kernel runs on the default rayon pool and on a one-thread pool.
//! Built with `--no-default-features` both arms take the sequential path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rayon::ThreadPool;

use glc_core::clustering::{kmeans, silhouette_values, KMeansConfig};
use glc_core::global::{assign_pseudo_labels, PseudoLabelConfig};
use glc_core::local::{knn_neighbor_targets, MemoryBank};
use glc_core::numeric::{pairwise_distance, softmax_rows, Matrix, Metric, RngState};

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = RngState::new(seed);
    let data = (0..rows * cols).map(|_| rng.normal()).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn pools() -> Vec<(&'static str, ThreadPool)> {
    let default = rayon::ThreadPoolBuilder::new().build().unwrap();
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    vec![("parallel", default), ("sequential", single)]
}

fn bench_kernels(c: &mut Criterion) {
    let x = random_matrix(1000, 32, 1);
    let probs = softmax_rows(&random_matrix(1000, 20, 2)).unwrap();
    let assignments: Vec<usize> = (0..x.rows()).map(|i| i % 10).collect();
    let bank = MemoryBank::init(&x, &probs).unwrap();
    let queries: Vec<usize> = (0..x.rows()).collect();

    let mut group = c.benchmark_group("kernels");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new("pairwise_distance", name), |b| {
            b.iter(|| pool.install(|| pairwise_distance(&x, Metric::Cosine).unwrap()))
        });
        group.bench_function(BenchmarkId::new("silhouette", name), |b| {
            b.iter(|| pool.install(|| silhouette_values(&x, &assignments, Metric::Cosine).unwrap()))
        });
        group.bench_function(BenchmarkId::new("kmeans_k20", name), |b| {
            b.iter(|| {
                pool.install(|| kmeans(&x, 20, &mut RngState::new(3), &KMeansConfig::default()).unwrap())
            })
        });
        group.bench_function(BenchmarkId::new("knn_targets", name), |b| {
            b.iter(|| pool.install(|| knn_neighbor_targets(&bank, &queries, 4).unwrap()))
        });
        group.bench_function(BenchmarkId::new("pseudo_labels", name), |b| {
            let cfg = PseudoLabelConfig::default();
            let rng = RngState::new(4);
            b.iter(|| pool.install(|| assign_pseudo_labels(&x, &probs, 20, &cfg, &rng).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_kernels);
criterion_main!(benches);
