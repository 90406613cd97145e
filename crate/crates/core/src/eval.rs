//! Dynamic link-prediction scoring (rank-based AUC and average precision),
//! the negative-to-positive smoothness ratio, and per-snapshot reporting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::graph::Snapshot;
use crate::ingest::SnapshotSequence;
use crate::matrix::Matrix;

/// Raw inner-product scores for node pairs. AUC/AP are rank-based and the
/// sigmoid is monotone, so no squashing is applied.
pub fn score_pairs(z: &Matrix, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pairs.len());
    for &(i, j) in pairs {
        if i >= z.rows || j >= z.rows {
            return Err(Error::Validation(format!(
                "pair ({i}, {j}) references a node without an embedding ({} rows)",
                z.rows
            )));
        }
        out.push(z.row_dot(i, j));
    }
    Ok(out)
}

/// Rank-based AUC: `P(pos > neg) + 0.5 * P(pos == neg)`, computed through
/// midranks so ties contribute exactly one half.
pub fn auc(pos_scores: &[f64], neg_scores: &[f64]) -> Result<f64> {
    if pos_scores.is_empty() || neg_scores.is_empty() {
        return Err(Error::Validation(
            "auc needs at least one positive and one negative score".into(),
        ));
    }
    let p = pos_scores.len();
    let n = neg_scores.len();
    let mut all: Vec<(f64, bool)> = pos_scores
        .iter()
        .map(|&s| (s, true))
        .chain(neg_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("scores must not be NaN"));

    // sum of positive midranks
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1..=j share the average rank
        let midrank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum += midrank;
            }
        }
        i = j;
    }
    Ok((rank_sum - (p * (p + 1)) as f64 / 2.0) / (p as f64 * n as f64))
}

/// Average precision over the ranking sorted by (score desc, positive-first
/// on ties): the mean of precision at each positive hit.
pub fn average_precision(pos_scores: &[f64], neg_scores: &[f64]) -> Result<f64> {
    if pos_scores.is_empty() || neg_scores.is_empty() {
        return Err(Error::Validation(
            "average_precision needs at least one positive and one negative score".into(),
        ));
    }
    let mut all: Vec<(f64, bool)> = pos_scores
        .iter()
        .map(|&s| (s, true))
        .chain(neg_scores.iter().map(|&s| (s, false)))
        .collect();
    // stable sort keeps positives (emitted first) ahead of tied negatives
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("scores must not be NaN"));
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    for (rank0, &(_, is_pos)) in all.iter().enumerate() {
        if is_pos {
            hits += 1;
            precision_sum += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(precision_sum / pos_scores.len() as f64)
}

/// Ratio of negative-to-positive smoothness for one snapshot.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RNegOutcome {
    pub positive_smoothness: f64,
    pub negative_smoothness: f64,
    /// `None` flags the degenerate `p_s == 0` case.
    pub ratio: Option<f64>,
}

/// `R_neg = n_s / p_s` with `p_s` summed over the snapshot's edges and
/// `n_s` over an equal number of sampled non-edges of that snapshot.
/// Pairs with endpoints outside the embedding rows are skipped.
pub fn r_neg(z: &Matrix, snapshot: &Snapshot, seed: u64) -> Result<RNegOutcome> {
    if snapshot.edges.is_empty() {
        return Err(Error::Validation(format!(
            "snapshot {} has no edges; r_neg undefined",
            snapshot.index
        )));
    }
    let mut edge_set: HashSet<(usize, usize)> = HashSet::new();
    let mut p_s = 0.0;
    let mut scored = 0usize;
    for &(i, j, _) in &snapshot.edges {
        edge_set.insert((i.min(j), i.max(j)));
        if i < z.rows && j < z.rows {
            p_s += z.row_dot(i, j);
            scored += 1;
        }
    }
    let n = z.rows.min(snapshot.num_nodes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut n_s = 0.0;
    if n >= 2 {
        let mut drawn = 0usize;
        let mut attempts = 0usize;
        while drawn < scored && attempts < scored * 100_000 {
            attempts += 1;
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i == j {
                continue;
            }
            if edge_set.contains(&(i.min(j), i.max(j))) {
                continue;
            }
            n_s += z.row_dot(i, j);
            drawn += 1;
        }
    }
    let ratio = if p_s == 0.0 { None } else { Some(n_s / p_s) };
    Ok(RNegOutcome {
        positive_smoothness: p_s,
        negative_smoothness: n_s,
        ratio,
    })
}

/// Inputs for scoring future snapshots against frozen embeddings.
pub struct EvalTask {
    /// Frozen `n x d` embeddings from the end of training.
    pub embeddings: Matrix,
    pub test_steps: Vec<usize>,
    pub seed: u64,
    /// Skip test edges touching nodes unseen in training (default true);
    /// with `false`, such edges are an error.
    pub skip_unseen: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub auc: f64,
    pub ap: f64,
    pub positives: usize,
    pub skipped_unseen: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub per_step: Vec<StepMetrics>,
    pub auc_mean: f64,
    pub ap_mean: f64,
    /// `(train step, ratio)` pairs plus their mean and final value; filled
    /// by the caller that replays per-step embeddings.
    pub rneg_per_step: Vec<(usize, f64)>,
    pub rneg_average: Option<f64>,
    pub rneg_latest: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
}

/// Score each test snapshot: positives are its edges (transductive repeats
/// and new links alike), negatives an equal count sampled uniformly from
/// non-edges among embedded nodes, excluding every pair that has appeared
/// in any snapshot up to and including the scored one.
pub fn evaluate_link_prediction(task: &EvalTask, seq: &SnapshotSequence) -> Result<MetricsReport> {
    if task.test_steps.is_empty() {
        return Err(Error::Validation("no test steps to evaluate".into()));
    }
    for &t in &task.test_steps {
        if t >= seq.num_steps() {
            return Err(Error::Validation(format!(
                "test step {t} out of range for {} steps",
                seq.num_steps()
            )));
        }
    }
    let z = &task.embeddings;
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);

    // cumulative positives through each step
    let mut cumulative: HashSet<(usize, usize)> = HashSet::new();
    let first_test = *task.test_steps.iter().min().unwrap();
    for s in &seq.snapshots[..first_test] {
        for &(i, j, _) in &s.edges {
            cumulative.insert((i.min(j), i.max(j)));
        }
    }

    let mut per_step = Vec::new();
    let mut next_cumulative_step = first_test;
    for &t in &task.test_steps {
        // fold in any skipped-over snapshots so exclusion stays cumulative
        for s in &seq.snapshots[next_cumulative_step..=t] {
            for &(i, j, _) in &s.edges {
                cumulative.insert((i.min(j), i.max(j)));
            }
        }
        next_cumulative_step = t + 1;

        let snapshot = &seq.snapshots[t];
        let mut kept: Vec<(usize, usize)> = Vec::new();
        let mut skipped = 0usize;
        for &(i, j, _) in &snapshot.edges {
            if i < z.rows && j < z.rows {
                kept.push((i, j));
            } else if task.skip_unseen {
                skipped += 1;
            } else {
                return Err(Error::Validation(format!(
                    "test snapshot {t} contains node pair ({i}, {j}) unseen in training"
                )));
            }
        }
        if kept.is_empty() {
            return Err(Error::Validation(format!(
                "test snapshot {t} has no scorable positive edges"
            )));
        }
        let pos_scores = score_pairs(z, &kept)?;

        let n = z.rows;
        if n < 2 {
            return Err(Error::Validation("need at least two embedded nodes".into()));
        }
        let mut neg_pairs = Vec::with_capacity(kept.len());
        let mut attempts = 0usize;
        while neg_pairs.len() < kept.len() {
            attempts += 1;
            if attempts > kept.len() * 100_000 {
                return Err(Error::Validation(format!(
                    "negative sampling for test step {t} exhausted its attempt budget"
                )));
            }
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i == j || cumulative.contains(&(i.min(j), i.max(j))) {
                continue;
            }
            neg_pairs.push((i, j));
        }
        let neg_scores = score_pairs(z, &neg_pairs)?;

        per_step.push(StepMetrics {
            step: t,
            auc: auc(&pos_scores, &neg_scores)?,
            ap: average_precision(&pos_scores, &neg_scores)?,
            positives: kept.len(),
            skipped_unseen: skipped,
        });
    }

    let count = per_step.len() as f64;
    let auc_mean = per_step.iter().map(|m| m.auc).sum::<f64>() / count;
    let ap_mean = per_step.iter().map(|m| m.ap).sum::<f64>() / count;
    Ok(MetricsReport {
        per_step,
        auc_mean,
        ap_mean,
        rneg_per_step: Vec::new(),
        rneg_average: None,
        rneg_latest: None,
        seed: task.seed,
        config_hash: String::new(),
    })
}

impl MetricsReport {
    /// One row per step per metric for this seed.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,step,metric,value\n");
        for m in &self.per_step {
            out.push_str(&format!("{},{},auc,{}\n", self.seed, m.step, m.auc));
            out.push_str(&format!("{},{},ap,{}\n", self.seed, m.step, m.ap));
        }
        for (step, r) in &self.rneg_per_step {
            out.push_str(&format!("{},{},rneg,{}\n", self.seed, step, r));
        }
        out
    }
}
