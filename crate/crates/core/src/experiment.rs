//! One reproducible experiment: for each seed, train on the configured
//! snapshot split, replay the frozen embeddings, and score link prediction
//! plus the smoothness ratio. Seeds run as independent workers.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate_link_prediction, r_neg, EvalTask, MetricsReport};
use crate::graph::symmetric_normalize;
use crate::ingest::SnapshotSequence;
use crate::models::replay_embeddings;
use crate::training::{train_on_steps, TrainOutcome};

const REPLAY_SEED_SALT: u64 = 0xa076_1d64_78bd_642f;

pub struct SeedResult {
    pub seed: u64,
    pub outcome: TrainOutcome,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

fn summarize(values: &[f64]) -> MetricSummary {
    if values.is_empty() {
        return MetricSummary {
            mean: 0.0,
            std: 0.0,
            per_seed: Vec::new(),
        };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MetricSummary {
        mean,
        std: var.sqrt(),
        per_seed: values.to_vec(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSummary {
    pub config_hash: String,
    pub framework: String,
    pub norm: String,
    pub train_steps: Vec<usize>,
    pub test_steps: Vec<usize>,
    pub auc: MetricSummary,
    pub ap: MetricSummary,
    /// Mean per-train-step smoothness ratio, averaged across seeds;
    /// degenerate (zero positive smoothness) steps are excluded.
    pub rneg_average: MetricSummary,
    pub rneg_latest: MetricSummary,
}

/// Replay a trained checkpoint over the split's train steps and score the
/// test steps. The checkpoint alone determines the trajectory: the replay
/// seed is derived from its stored training seed.
pub fn evaluate_checkpoint(
    seq: &SnapshotSequence,
    cfg: &ExperimentConfig,
    checkpoint: &crate::models::ModelCheckpoint,
) -> Result<MetricsReport> {
    let (train_steps, test_steps) = cfg.split.resolve(seq.num_steps())?;
    let seed = checkpoint.header.seed;
    let mut state = checkpoint.to_state()?;
    let adjacencies: Vec<_> = train_steps
        .iter()
        .map(|&t| std::rc::Rc::new(symmetric_normalize(&seq.snapshots[t])))
        .collect();
    let per_step = replay_embeddings(&mut state, &adjacencies, seed ^ REPLAY_SEED_SALT)?;
    let final_z = per_step
        .last()
        .cloned()
        .ok_or_else(|| Error::Validation("replay produced no embeddings".into()))?;

    let task = EvalTask {
        embeddings: final_z,
        test_steps,
        seed,
        skip_unseen: true,
    };
    let mut report = evaluate_link_prediction(&task, seq)?;
    report.config_hash = cfg.hash();

    // smoothness ratio across the training trajectory
    let mut ratios = Vec::new();
    for (z, &t) in per_step.iter().zip(&train_steps) {
        let snapshot = &seq.snapshots[t];
        if snapshot.edges.is_empty() {
            continue;
        }
        let out = r_neg(z, snapshot, seed.wrapping_add(t as u64))?;
        if let Some(ratio) = out.ratio {
            report.rneg_per_step.push((t, ratio));
            ratios.push(ratio);
        }
    }
    if !ratios.is_empty() {
        report.rneg_average = Some(ratios.iter().sum::<f64>() / ratios.len() as f64);
        report.rneg_latest = ratios.last().copied();
    }
    Ok(report)
}

/// Train, replay, and evaluate one seed.
pub fn run_seed(
    seq: &SnapshotSequence,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<SeedResult> {
    cfg.validate()?;
    let (train_steps, _) = cfg.split.resolve(seq.num_steps())?;
    let outcome = train_on_steps(seq, &train_steps, cfg, seed)?;
    let report = evaluate_checkpoint(seq, cfg, &outcome.checkpoint)?;
    Ok(SeedResult {
        seed,
        outcome,
        report,
    })
}

/// Run every configured seed, `threads` at a time, and aggregate.
pub fn run_experiment(
    seq: &SnapshotSequence,
    cfg: &ExperimentConfig,
    threads: usize,
) -> Result<(ExperimentSummary, Vec<SeedResult>)> {
    cfg.validate()?;
    let seeds = cfg.seeds.clone();
    let slots: Mutex<Vec<Option<Result<SeedResult>>>> =
        Mutex::new((0..seeds.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = threads.max(1).min(seeds.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= seeds.len() {
                    break;
                }
                let result = run_seed(seq, cfg, seeds[idx]);
                slots.lock().expect("worker panicked")[idx] = Some(result);
            });
        }
    });

    let mut results = Vec::with_capacity(seeds.len());
    for slot in slots.into_inner().expect("no poisoned lock") {
        results.push(slot.expect("every seed slot filled")?);
    }

    let reports: Vec<&MetricsReport> = results.iter().map(|r| &r.report).collect();
    let summary = summarize_reports(seq, cfg, &reports)?;
    Ok((summary, results))
}

/// Aggregate per-seed reports into the cross-seed summary.
pub fn summarize_reports(
    seq: &SnapshotSequence,
    cfg: &ExperimentConfig,
    reports: &[&MetricsReport],
) -> Result<ExperimentSummary> {
    if reports.is_empty() {
        return Err(Error::Validation("no reports to summarize".into()));
    }
    let (train_steps, test_steps) = cfg.split.resolve(seq.num_steps())?;
    let aucs: Vec<f64> = reports.iter().map(|r| r.auc_mean).collect();
    let aps: Vec<f64> = reports.iter().map(|r| r.ap_mean).collect();
    let rneg_avg: Vec<f64> = reports.iter().filter_map(|r| r.rneg_average).collect();
    let rneg_latest: Vec<f64> = reports.iter().filter_map(|r| r.rneg_latest).collect();
    Ok(ExperimentSummary {
        config_hash: cfg.hash(),
        framework: cfg.framework.clone(),
        norm: cfg.norm.clone(),
        train_steps,
        test_steps,
        auc: summarize(&aucs),
        ap: summarize(&aps),
        rneg_average: summarize(&rneg_avg),
        rneg_latest: summarize(&rneg_latest),
    })
}
