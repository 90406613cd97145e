//! Shared input generators for the kernel benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dynembed_core::graph::{build_snapshot, Snapshot};
use dynembed_core::matrix::Matrix;

/// Random graph with roughly `avg_degree * n / 2` edges.
pub fn random_graph(n: usize, avg_degree: f64, seed: u64) -> Snapshot {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges_target = (avg_degree * n as f64 / 2.0) as usize;
    let mut edges = Vec::with_capacity(edges_target);
    for _ in 0..edges_target {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if i != j {
            edges.push((i, j, 1.0));
        }
    }
    build_snapshot(&edges, n).expect("valid edges")
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix {
        rows,
        cols,
        data: (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    }
}

pub fn random_scores(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-3.0..3.0)).collect()
}
