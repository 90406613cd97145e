//! Executable form of the feature-shrink theory: the weighted smoothness
//! distance, the aggregation-contraction inequality, its gradient/Hessian
//! probes, and the two-arm temporal trace that exposes the cumulative
//! shrink (and how the normalization layer prevents it).

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{glorot_values, Tape};
use crate::error::{Error, Result};
use crate::graph::{
    row_normalize, symmetric_normalize, transition_normalize, AdjacencyFlavor,
    NormalizedAdjacency, Snapshot,
};
use crate::ingest::SnapshotSequence;
use crate::matrix::Matrix;
use crate::models::{grow_with_rows, Framework, ModelState};
use crate::norms::NormKind;

/// `D(X) = 1/2 * sum_{i,j} a_ij * ||x_i - x_j||^2` over the sparse entries
/// of a row-stochastic weighting.
pub fn weighted_smoothness_distance(x: &Matrix, adj: &NormalizedAdjacency) -> Result<f64> {
    if adj.flavor() != AdjacencyFlavor::RowStochastic {
        return Err(Error::Validation(
            "weighted smoothness distance expects the row-stochastic flavor".into(),
        ));
    }
    if adj.dim() != x.rows {
        return Err(Error::Shape {
            op: "weighted_smoothness_distance",
            expected: (adj.dim(), x.cols),
            got: (x.rows, x.cols),
        });
    }
    let mut total = 0.0;
    for (i, j, v) in adj.entries() {
        if i != j && v != 0.0 {
            total += v * x.row_dist_sq(i, j);
        }
    }
    Ok(0.5 * total)
}

/// Unweighted total pairwise squared distance over all ordered pairs.
pub fn total_pairwise_distance(x: &Matrix) -> f64 {
    let mut total = 0.0;
    for i in 0..x.rows {
        for j in 0..x.rows {
            total += x.row_dist_sq(i, j);
        }
    }
    total
}

/// One smoothing step `x~ = Ã x`: no weights, no nonlinearity.
pub fn aggregate(adj: &NormalizedAdjacency, x: &Matrix) -> Result<Matrix> {
    adj.spmm(x)
}

/// Amount by which one aggregation step violates the contraction
/// `D(Ãx) <= D(x)`; non-positive values mean the inequality holds.
pub fn contraction_violation(x: &Matrix, adj: &NormalizedAdjacency) -> Result<f64> {
    let before = weighted_smoothness_distance(x, adj)?;
    let after = weighted_smoothness_distance(&aggregate(adj, x)?, adj)?;
    Ok(after - before)
}

/// Gradient identity check: with row sums equal to one,
/// `x_i - dD/dx_i = x~_i` exactly, where `dD/dx_i = sum_j a_ij (x_i - x_j)`.
/// Returns the max-norm residual of that identity.
pub fn lemma1_check(x: &Matrix, adj: &NormalizedAdjacency) -> Result<f64> {
    if adj.flavor() != AdjacencyFlavor::RowStochastic {
        return Err(Error::Validation(
            "lemma1_check expects the row-stochastic flavor".into(),
        ));
    }
    if adj.dim() != x.rows {
        return Err(Error::Shape {
            op: "lemma1_check",
            expected: (adj.dim(), x.cols),
            got: (x.rows, x.cols),
        });
    }
    let smoothed = aggregate(adj, x)?;
    let mut grad = Matrix::zeros(x.rows, x.cols);
    for (i, j, v) in adj.entries() {
        for c in 0..x.cols {
            let d = v * (x.get(i, c) - x.get(j, c));
            grad.set(i, c, grad.get(i, c) + d);
        }
    }
    let mut residual: f64 = 0.0;
    for i in 0..x.rows {
        for c in 0..x.cols {
            let r = (x.get(i, c) - grad.get(i, c) - smoothed.get(i, c)).abs();
            residual = residual.max(r);
        }
    }
    Ok(residual)
}

/// Hessian bound probe: the spectrum of `I + D^{-1}A` lies in [0, 2], i.e.
/// `2I - ∇²D` is positive semidefinite as an operator. Because `D^{-1}A` is
/// self-adjoint only in the degree-weighted inner product, the quadratic
/// form is evaluated there: `q(v) = (vᵀDv + vᵀAv) / vᵀDv`. Isolated nodes
/// fall back to a unit self-transition. Returns the minimum sampled `q`.
pub fn lemma2_check(s: &Snapshot, num_vectors: usize, seed: u64) -> Result<f64> {
    let n = s.num_nodes;
    if n == 0 {
        return Err(Error::Validation("empty snapshot".into()));
    }
    if n > 200 {
        return Err(Error::Validation(format!(
            "lemma2_check is budgeted for n <= 200, got {n}; sample a subgraph instead"
        )));
    }
    let (transition, degree) = transition_normalize(s);
    // recover the un-normalized weighted adjacency entries a_ij = t_ij * d_i
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_q = f64::INFINITY;
    let mut v = vec![0.0; n];
    for _ in 0..num_vectors {
        let mut norm_sq = 0.0;
        for vi in v.iter_mut() {
            *vi = rng.random_range(-1.0..1.0);
            norm_sq += *vi * *vi;
        }
        if norm_sq == 0.0 {
            continue;
        }
        let mut vdv = 0.0;
        for i in 0..n {
            vdv += degree[i] * v[i] * v[i];
        }
        let mut vav = 0.0;
        for (i, j, t) in transition.entries() {
            vav += v[i] * t * degree[i] * v[j];
        }
        let q = (vdv + vav) / vdv;
        min_q = min_q.min(q);
    }
    Ok(min_q)
}

/// Per-step distances of the two-arm temporal run.
#[derive(Debug, Clone)]
pub struct TraceStep {
    pub step: usize,
    pub num_nodes: usize,
    /// `D(H~_t)`: weighted distance with graph convolution applied.
    pub dist_conv: f64,
    /// `D(H_t)`: weighted distance with the transformation only.
    pub dist_noconv: f64,
    pub total_pairwise_conv: f64,
    pub total_pairwise_noconv: f64,
}

/// Distance trajectory of a framework run twice from one initial state:
/// one arm applies aggregation, the other bypasses it.
#[derive(Debug, Clone)]
pub struct DistanceTrace {
    pub framework: Framework,
    pub norm: NormKind,
    pub steps: Vec<TraceStep>,
}

impl DistanceTrace {
    pub fn per_step_holds(&self, rel_tol: f64) -> bool {
        self.steps
            .iter()
            .all(|s| s.dist_conv <= s.dist_noconv * (1.0 + rel_tol) + 1e-12)
    }

    pub fn summed_holds(&self, rel_tol: f64) -> bool {
        let conv: f64 = self.steps.iter().map(|s| s.dist_conv).sum();
        let noconv: f64 = self.steps.iter().map(|s| s.dist_noconv).sum();
        conv <= noconv * (1.0 + rel_tol) + 1e-12
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "framework,norm,step,num_nodes,dist_conv,dist_noconv,total_pairwise_conv,total_pairwise_noconv\n",
        );
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                self.framework.name(),
                self.norm.name(),
                s.step,
                s.num_nodes,
                s.dist_conv,
                s.dist_noconv,
                s.total_pairwise_conv,
                s.total_pairwise_noconv
            ));
        }
        out
    }
}

/// The transformation-only arm: the same weights with every aggregation
/// replaced by the identity.
fn forward_no_conv(
    state: &mut ModelState,
    tape: &mut Tape,
) -> Result<crate::autodiff::Tensor> {
    let x = state.hidden.clone();
    let z = match state.framework {
        Framework::DynGcn => {
            let h = tape.matmul(&x, &state.block.w1)?;
            let h = tape.relu(&h)?;
            tape.matmul(&h, &state.block.w2)?
        }
        Framework::GruGcn => {
            let cell = state
                .cell
                .as_ref()
                .ok_or_else(|| Error::Validation("gru-gcn state missing cell".into()))?;
            let h = tape.matmul(&x, &state.block.w1)?;
            let h = tape.relu(&h)?;
            let s = tape.matmul(&h, &state.block.w2)?;
            cell.forward(tape, &s, &x)?
        }
    };
    let z = crate::norms::apply(tape, &z, state.norm)?;
    state.hidden = z.clone();
    state.detach_hidden();
    Ok(z)
}

fn forward_conv(
    state: &mut ModelState,
    tape: &mut Tape,
    adj: &Rc<NormalizedAdjacency>,
) -> Result<crate::autodiff::Tensor> {
    use crate::models::gcn_forward;
    let x = state.hidden.clone();
    let z = match state.framework {
        Framework::DynGcn => {
            let mut rng = ChaCha8Rng::seed_from_u64(0); // dropout disabled; rng unused
            gcn_forward(tape, &state.block, adj, &x, false, &mut rng)?
        }
        Framework::GruGcn => {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let cell = state
                .cell
                .as_ref()
                .ok_or_else(|| Error::Validation("gru-gcn state missing cell".into()))?;
            let s = gcn_forward(tape, &state.block, adj, &x, false, &mut rng)?;
            cell.forward(tape, &s, &x)?
        }
    };
    let z = crate::norms::apply(tape, &z, state.norm)?;
    state.hidden = z.clone();
    state.detach_hidden();
    Ok(z)
}

/// Run the framework twice over the sequence from an identical initial
/// state with identical (untrained) weights and identical new-node rows:
/// the `conv` arm applies graph convolution, the other arm only the
/// transformation. Records both weighted and total pairwise distances.
pub fn corollary1_trace(
    seq: &SnapshotSequence,
    framework: Framework,
    norm: NormKind,
    dim: usize,
    seed: u64,
) -> Result<DistanceTrace> {
    if seq.snapshots.is_empty() {
        return Err(Error::Validation("empty sequence".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n0 = seq.snapshots[0].num_nodes;
    let mut conv_state = ModelState::new(framework, dim, 0.0, norm, n0, &mut rng)?;
    // second arm shares the weight values and the initial hidden state
    let ckpt = crate::models::ModelCheckpoint::from_state(&conv_state, seed);
    let mut plain_state = ckpt.to_state()?;

    let mut tape = Tape::new();
    let mut steps = Vec::with_capacity(seq.num_steps());
    let mut growth_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995);
    for snapshot in &seq.snapshots {
        let n = snapshot.num_nodes;
        let old_n = conv_state.hidden.rows();
        if n > old_n {
            let rows = glorot_values(n - old_n, dim, dim, dim, &mut growth_rng);
            grow_with_rows(&mut conv_state, n, rows.clone())?;
            grow_with_rows(&mut plain_state, n, rows)?;
        }
        let adj_sym = Rc::new(symmetric_normalize(snapshot));
        let adj_row = row_normalize(snapshot);
        let z_conv = forward_conv(&mut conv_state, &mut tape, &adj_sym)?;
        tape.discard();
        let z_plain = forward_no_conv(&mut plain_state, &mut tape)?;
        tape.discard();
        let m_conv = z_conv.to_matrix();
        let m_plain = z_plain.to_matrix();
        steps.push(TraceStep {
            step: snapshot.index,
            num_nodes: n,
            dist_conv: weighted_smoothness_distance(&m_conv, &adj_row)?,
            dist_noconv: weighted_smoothness_distance(&m_plain, &adj_row)?,
            total_pairwise_conv: total_pairwise_distance(&m_conv),
            total_pairwise_noconv: total_pairwise_distance(&m_plain),
        });
    }
    Ok(DistanceTrace {
        framework,
        norm,
        steps,
    })
}

/// Erdős–Rényi snapshot for randomized theory sweeps.
pub fn random_er_snapshot<R: Rng>(n: usize, p: f64, rng: &mut R) -> Snapshot {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random::<f64>() < p {
                edges.push((i, j, 1.0));
            }
        }
    }
    crate::graph::build_snapshot(&edges, n).expect("generated edges are valid")
}

/// Random feature matrix with entries in [-scale, scale].
pub fn random_features<R: Rng>(n: usize, d: usize, scale: f64, rng: &mut R) -> Matrix {
    Matrix {
        rows: n,
        cols: d,
        data: (0..n * d).map(|_| rng.random_range(-scale..scale)).collect(),
    }
}

/// Growing random sequence for the temporal traces.
pub fn random_er_sequence<R: Rng>(
    steps: usize,
    n0: usize,
    growth: usize,
    p: f64,
    rng: &mut R,
) -> SnapshotSequence {
    let mut snapshots = Vec::with_capacity(steps);
    let mut record_counts = Vec::with_capacity(steps);
    let mut n = n0;
    for step in 0..steps {
        let mut s = random_er_snapshot(n, p, rng);
        s.index = step;
        record_counts.push(s.edges.len());
        snapshots.push(s);
        n += growth;
    }
    SnapshotSequence {
        snapshots,
        record_counts,
        warnings: Vec::new(),
    }
}
