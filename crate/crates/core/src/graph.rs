//! Snapshot representation, sparse adjacency storage, and the normalizations
//! used by every graph convolution.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// One time-sliced graph: the cumulative node set plus the interval edge set.
///
/// Edges are stored once per unordered node pair (canonical `src <= dst`),
/// with duplicate pairs merged by weight summation. Mirroring for the
/// undirected adjacency happens at normalization time.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    /// 0-based time step.
    pub index: usize,
    /// Cumulative node count; non-decreasing across a sequence.
    pub num_nodes: usize,
    /// Merged `(src, dst, weight)` triples, sorted, `src <= dst`.
    pub edges: Vec<(usize, usize, f64)>,
    /// Step at which each node first appeared.
    pub node_first_seen: Vec<usize>,
}

/// Build a validated snapshot from raw edge triples.
///
/// Duplicate pairs (in either orientation) merge by weight summation.
/// Endpoints must be `< num_nodes` and weights non-negative.
pub fn build_snapshot(edges: &[(usize, usize, f64)], num_nodes: usize) -> Result<Snapshot> {
    let mut merged: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for &(src, dst, w) in edges {
        if src >= num_nodes || dst >= num_nodes {
            return Err(Error::Validation(format!(
                "edge ({src}, {dst}, {w}) has endpoint out of range for {num_nodes} nodes"
            )));
        }
        if w < 0.0 || !w.is_finite() {
            return Err(Error::Validation(format!(
                "edge ({src}, {dst}) has invalid weight {w}; weights must be finite and >= 0"
            )));
        }
        let key = if src <= dst { (src, dst) } else { (dst, src) };
        *merged.entry(key).or_insert(0.0) += w;
    }
    Ok(Snapshot {
        index: 0,
        num_nodes,
        edges: merged.into_iter().map(|((s, d), w)| (s, d, w)).collect(),
        node_first_seen: vec![0; num_nodes],
    })
}

/// Which normalization produced a [`NormalizedAdjacency`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjacencyFlavor {
    /// `D̃^{-1/2} (A + I) D̃^{-1/2}`: symmetric, spectrum in [-1, 1].
    Symmetric,
    /// Row-stochastic: every row sums to exactly 1.
    RowStochastic,
}

/// Sparse normalized adjacency in compressed row-major form with sorted
/// column indices, so accumulation order (and therefore floating-point
/// output) is deterministic.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    flavor: AdjacencyFlavor,
}

/// Accumulate the mirrored weighted adjacency of a snapshot into a dense-keyed
/// map; self-loops contribute once.
fn mirrored_entries(s: &Snapshot) -> BTreeMap<(usize, usize), f64> {
    let mut m = BTreeMap::new();
    for &(src, dst, w) in &s.edges {
        *m.entry((src, dst)).or_insert(0.0) += w;
        if src != dst {
            *m.entry((dst, src)).or_insert(0.0) += w;
        }
    }
    m
}

fn from_entries(
    n: usize,
    entries: BTreeMap<(usize, usize), f64>,
    flavor: AdjacencyFlavor,
) -> NormalizedAdjacency {
    let mut row_ptr = vec![0usize; n + 1];
    for &(i, _) in entries.keys() {
        row_ptr[i + 1] += 1;
    }
    for i in 0..n {
        row_ptr[i + 1] += row_ptr[i];
    }
    let mut col_idx = Vec::with_capacity(entries.len());
    let mut values = Vec::with_capacity(entries.len());
    // BTreeMap iterates (row, col) sorted, which is exactly CSR order.
    for ((_, j), v) in entries {
        col_idx.push(j);
        values.push(v);
    }
    NormalizedAdjacency {
        n,
        row_ptr,
        col_idx,
        values,
        flavor,
    }
}

/// `Ã = D̃^{-1/2} (A + I) D̃^{-1/2}` with `D̃ = D + I`; self-loops present in
/// the data merge with the added identity loop.
pub fn symmetric_normalize(s: &Snapshot) -> NormalizedAdjacency {
    let n = s.num_nodes;
    let mut entries = mirrored_entries(s);
    for i in 0..n {
        *entries.entry((i, i)).or_insert(0.0) += 1.0;
    }
    let mut degree = vec![0.0; n];
    for (&(i, _), &v) in &entries {
        degree[i] += v;
    }
    for ((i, j), v) in entries.iter_mut() {
        *v /= (degree[*i] * degree[*j]).sqrt();
    }
    from_entries(n, entries, AdjacencyFlavor::Symmetric)
}

/// Row-stochastic `Ã = D̃^{-1} (A + I)`; self-loops guarantee no zero rows.
pub fn row_normalize(s: &Snapshot) -> NormalizedAdjacency {
    let n = s.num_nodes;
    let mut entries = mirrored_entries(s);
    for i in 0..n {
        *entries.entry((i, i)).or_insert(0.0) += 1.0;
    }
    let mut degree = vec![0.0; n];
    for (&(i, _), &v) in &entries {
        degree[i] += v;
    }
    for ((i, _), v) in entries.iter_mut() {
        *v /= degree[*i];
    }
    from_entries(n, entries, AdjacencyFlavor::RowStochastic)
}

/// Un-augmented transition matrix `D^{-1} A` used by the theory probes.
/// Isolated nodes fall back to a unit self-transition so every row still
/// sums to 1. Also returns the (fallback-adjusted) degree vector, which the
/// Hessian probe needs for its degree-weighted inner product.
pub fn transition_normalize(s: &Snapshot) -> (NormalizedAdjacency, Vec<f64>) {
    let n = s.num_nodes;
    let mut entries = mirrored_entries(s);
    let mut degree = vec![0.0; n];
    for (&(i, _), &v) in &entries {
        degree[i] += v;
    }
    for (i, d) in degree.iter_mut().enumerate() {
        if *d == 0.0 {
            entries.insert((i, i), 1.0);
            *d = 1.0;
        }
    }
    for ((i, _), v) in entries.iter_mut() {
        *v /= degree[*i];
    }
    (
        from_entries(n, entries, AdjacencyFlavor::RowStochastic),
        degree,
    )
}

impl NormalizedAdjacency {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn flavor(&self) -> AdjacencyFlavor {
        self.flavor
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterate `(row, col, value)` in CSR order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| {
            (self.row_ptr[i]..self.row_ptr[i + 1])
                .map(move |k| (i, self.col_idx[k], self.values[k]))
        })
    }

    /// Sparse-dense product `Ã · X`, deterministic accumulation order.
    pub fn spmm(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows != self.n {
            return Err(Error::Shape {
                op: "spmm",
                expected: (self.n, x.cols),
                got: (x.rows, x.cols),
            });
        }
        let cols = x.cols;
        let mut out = vec![0.0; self.n * cols];
        for i in 0..self.n {
            let dst = &mut out[i * cols..(i + 1) * cols];
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[k];
                let v = self.values[k];
                let src = &x.data[j * cols..(j + 1) * cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
        Matrix::new(self.n, cols, out)
    }

    /// `Ãᵀ · X`; needed by backward passes through row-stochastic products.
    pub fn spmm_transpose(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows != self.n {
            return Err(Error::Shape {
                op: "spmm_transpose",
                expected: (self.n, x.cols),
                got: (x.rows, x.cols),
            });
        }
        let cols = x.cols;
        let mut out = vec![0.0; self.n * cols];
        for i in 0..self.n {
            let src = &x.data[i * cols..(i + 1) * cols];
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[k];
                let v = self.values[k];
                let dst = &mut out[j * cols..(j + 1) * cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
        Matrix::new(self.n, cols, out)
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n, self.n);
        for (i, j, v) in self.entries() {
            m.set(i, j, v);
        }
        m
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n];
        for (i, _, v) in self.entries() {
            sums[i] += v;
        }
        sums
    }
}
