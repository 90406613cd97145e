//! Negative sampling, the link-prediction BCE objective, Adam with
//! decoupled weight decay, and the sequential training loop.

use std::collections::HashSet;
use std::rc::Rc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::config::{ExperimentConfig, UpdateGranularity};
use crate::error::{Error, Result};
use crate::graph::{symmetric_normalize, Snapshot};
use crate::ingest::SnapshotSequence;
use crate::models::{step_windowed, ModelCheckpoint, ModelState};

const SAMPLER_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const MAX_ATTEMPTS_PER_PAIR: usize = 100_000;

/// Uniform sampler over node pairs that have never appeared as edges.
/// Pairs are unordered; self-pairs are never produced.
pub struct NegativeSampler {
    cumulative: HashSet<(u32, u32)>,
    rng: ChaCha8Rng,
    pub per_positive: usize,
}

fn canonical(i: usize, j: usize) -> (u32, u32) {
    if i <= j {
        (i as u32, j as u32)
    } else {
        (j as u32, i as u32)
    }
}

impl NegativeSampler {
    pub fn new(seed: u64, per_positive: usize) -> NegativeSampler {
        NegativeSampler {
            cumulative: HashSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            per_positive,
        }
    }

    pub fn clear(&mut self) {
        self.cumulative.clear();
    }

    /// Mark all edges of a snapshot as positives (never to be sampled).
    pub fn observe_snapshot(&mut self, s: &Snapshot) {
        for &(src, dst, _) in &s.edges {
            self.cumulative.insert(canonical(src, dst));
        }
    }

    pub fn observe_pair(&mut self, i: usize, j: usize) {
        self.cumulative.insert(canonical(i, j));
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.cumulative.contains(&canonical(i, j))
    }

    pub fn cumulative_len(&self) -> usize {
        self.cumulative.len()
    }

    /// Draw `k` uniform pairs from `{(i, j) : i != j}` minus the cumulative
    /// edge set, over `n` nodes, by rejection.
    pub fn sample(&mut self, k: usize, n: usize) -> Result<Vec<(usize, usize)>> {
        if k == 0 {
            return Ok(Vec::new());
        }
        if n < 2 {
            return Err(Error::Validation(format!(
                "cannot sample negative pairs over {n} node(s)"
            )));
        }
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            let mut accepted = None;
            for _ in 0..MAX_ATTEMPTS_PER_PAIR {
                let i = self.rng.random_range(0..n);
                let j = self.rng.random_range(0..n);
                if i == j {
                    continue;
                }
                if self.cumulative.contains(&canonical(i, j)) {
                    continue;
                }
                accepted = Some((i.min(j), i.max(j)));
                break;
            }
            match accepted {
                Some(pair) => out.push(pair),
                None => {
                    return Err(Error::Validation(format!(
                        "negative sampling exhausted {MAX_ATTEMPTS_PER_PAIR} attempts \
                         (graph nearly complete); request fewer negatives"
                    )))
                }
            }
        }
        Ok(out)
    }
}

/// `sum_pos -log σ(⟨z_i, z_j⟩) - λ · sum_neg log(1 - σ(⟨z_i, z_j⟩))`,
/// stabilized through log-sigmoid; differentiable w.r.t. `z`.
pub fn bce_loss(
    tape: &mut Tape,
    z: &Tensor,
    pos: &[(usize, usize)],
    neg: &[(usize, usize)],
    lambda_neg: f64,
) -> Result<Tensor> {
    let mut terms: Vec<Tensor> = Vec::new();
    if !pos.is_empty() {
        let scores = pair_scores(tape, z, pos)?;
        let logs = tape.log_sigmoid(&scores)?;
        let total = tape.sum(&logs)?;
        terms.push(tape.scale(&total, -1.0)?);
    }
    if !neg.is_empty() {
        // log(1 - σ(s)) = log σ(-s)
        let scores = pair_scores(tape, z, neg)?;
        let neg_scores = tape.scale(&scores, -1.0)?;
        let logs = tape.log_sigmoid(&neg_scores)?;
        let total = tape.sum(&logs)?;
        terms.push(tape.scale(&total, -lambda_neg)?);
    }
    match terms.len() {
        0 => Tensor::from_values(1, 1, vec![0.0]),
        1 => Ok(terms.pop().unwrap()),
        _ => tape.add(&terms[0], &terms[1]),
    }
}

fn pair_scores(tape: &mut Tape, z: &Tensor, pairs: &[(usize, usize)]) -> Result<Tensor> {
    let (is, js): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let zi = tape.row_gather(z, &is)?;
    let zj = tape.row_gather(z, &js)?;
    tape.rowwise_dot(&zi, &zj)
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias correction and decoupled weight decay
/// (`p <- p - lr * wd * p` applied after the adaptive update).
pub struct AdamState {
    pub cfg: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, params: &[Tensor]) -> AdamState {
        AdamState {
            cfg,
            step: 0,
            first: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// Apply one update from the gradients accumulated on `params`,
    /// then zero them. Non-finite gradients abort the run.
    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (idx, p) in params.iter().enumerate() {
            let grad = p.grad();
            for (gi, g) in grad.iter().enumerate() {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "gradient entry {gi} of parameter {idx} is {g}; aborting"
                    )));
                }
                let m = &mut self.first[idx][gi];
                let v = &mut self.second[idx][gi];
                *m = self.cfg.beta1 * *m + (1.0 - self.cfg.beta1) * g;
                *v = self.cfg.beta2 * *v + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                let mut values = p.values_mut();
                values[gi] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
                values[gi] -= self.cfg.lr * self.cfg.weight_decay * values[gi];
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Default, Clone)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
    pub epoch_losses: Vec<f64>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,loss,wall_ms\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.step, r.loss, r.wall_ms));
        }
        out
    }
}

pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub log: TrainLog,
    pub best_epoch: usize,
    pub best_loss: f64,
}

/// Sequential training over the configured train steps: per epoch the hidden
/// state resets to its initial value, snapshots are visited in order, and the
/// loss is optimized with Adam. Negatives are resampled every epoch; the
/// checkpoint with the lowest summed training loss wins (no validation set).
pub fn train(seq: &SnapshotSequence, cfg: &ExperimentConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_steps, _) = cfg.split.resolve(seq.num_steps())?;
    train_on_steps(seq, &train_steps, cfg, seed)
}

/// Training loop over explicit step indices (the split already resolved).
pub fn train_on_steps(
    seq: &SnapshotSequence,
    train_steps: &[usize],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    if train_steps.is_empty() {
        return Err(Error::Validation("no train steps".into()));
    }
    let framework = cfg.framework_kind()?;
    let norm = cfg.norm_kind()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let adjacencies: Vec<Rc<_>> = train_steps
        .iter()
        .map(|&t| Rc::new(symmetric_normalize(&seq.snapshots[t])))
        .collect();
    let positives: Vec<Vec<(usize, usize)>> = train_steps
        .iter()
        .map(|&t| {
            seq.snapshots[t]
                .edges
                .iter()
                .map(|&(s, d, _)| (s, d))
                .collect()
        })
        .collect();

    let initial_nodes = seq.snapshots[train_steps[0]].num_nodes;
    let mut state = ModelState::new(framework, cfg.dim, cfg.dropout, norm, initial_nodes, &mut rng)?;
    let params = state.parameters();
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
        &params,
    );
    let mut sampler = NegativeSampler::new(seed ^ SAMPLER_SEED_SALT, cfg.per_positive);

    let mut log = TrainLog::default();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_params: Vec<Vec<f64>> = params.iter().map(|p| p.values().clone()).collect();

    let mut tape = Tape::new();
    for epoch in 0..cfg.epochs {
        state.reset_hidden();
        sampler.clear();
        let mut epoch_loss = 0.0;
        let mut window: Vec<Tensor> = Vec::new();

        for (pos_idx, (&t, adj)) in train_steps.iter().zip(&adjacencies).enumerate() {
            let started = Instant::now();
            let z = step_windowed(&mut state, &mut tape, adj, true, &mut rng)?;
            let pos = &positives[pos_idx];
            sampler.observe_snapshot(&seq.snapshots[t]);
            let negs = sampler.sample(cfg.per_positive * pos.len(), adj.dim())?;
            let loss = bce_loss(&mut tape, &z, pos, &negs, cfg.loss_lambda)?;
            let loss_value = loss.scalar()?;
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at epoch {epoch} step {t} is {loss_value}"
                )));
            }
            epoch_loss += loss_value;
            window.push(loss);

            let window_full = window.len() == cfg.bptt_window;
            let last_step = pos_idx + 1 == train_steps.len();
            if window_full || last_step {
                let mut total = window[0].clone();
                for extra in &window[1..] {
                    total = tape.add(&total, extra)?;
                }
                tape.backward(&total)?;
                window.clear();
                if cfg.update_granularity == UpdateGranularity::PerStep {
                    adam.step(&params)?;
                }
                state.detach_hidden();
            }
            log.rows.push(TrainLogRow {
                epoch,
                step: t,
                loss: loss_value,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
        }

        if cfg.update_granularity == UpdateGranularity::PerEpochSum {
            adam.step(&params)?;
        }
        log.epoch_losses.push(epoch_loss);
        if epoch_loss < best_loss {
            best_loss = epoch_loss;
            best_epoch = epoch;
            for (dst, p) in best_params.iter_mut().zip(&params) {
                dst.copy_from_slice(&p.values());
            }
        }
    }

    for (src, p) in best_params.iter().zip(&params) {
        p.values_mut().copy_from_slice(src);
    }
    Ok(TrainOutcome {
        checkpoint: ModelCheckpoint::from_state(&state, seed),
        log,
        best_epoch,
        best_loss,
    })
}
