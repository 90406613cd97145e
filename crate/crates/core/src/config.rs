//! Experiment configuration: JSON on disk, kebab-case CLI flags on top.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Framework;
use crate::norms::NormKind;

/// How snapshots split into train and test steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum SplitSpec {
    /// First `floor(0.8 * T)` steps train, the rest test.
    Ratio80,
    /// First `floor(0.6 * T)` steps train (long-distance protocol).
    Ratio60,
    Explicit { train: Vec<usize>, test: Vec<usize> },
}

impl SplitSpec {
    pub fn parse(name: &str) -> Result<SplitSpec> {
        match name {
            "ratio80" => Ok(SplitSpec::Ratio80),
            "ratio60" => Ok(SplitSpec::Ratio60),
            other => Err(Error::Validation(format!(
                "unknown split {other:?} (expected ratio80|ratio60; explicit splits come from config files)"
            ))),
        }
    }

    /// Resolve to ordered, disjoint `(train, test)` step lists.
    pub fn resolve(&self, total_steps: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let by_ratio = |ratio: f64| -> Result<(Vec<usize>, Vec<usize>)> {
            let train_count = (ratio * total_steps as f64).floor() as usize;
            if train_count == 0 || train_count >= total_steps {
                return Err(Error::Validation(format!(
                    "cannot split {total_steps} steps with ratio {ratio}: need at least one train and one test step"
                )));
            }
            Ok(((0..train_count).collect(), (train_count..total_steps).collect()))
        };
        match self {
            SplitSpec::Ratio80 => by_ratio(0.8),
            SplitSpec::Ratio60 => by_ratio(0.6),
            SplitSpec::Explicit { train, test } => {
                if train.is_empty() || test.is_empty() {
                    return Err(Error::Validation(
                        "explicit split needs non-empty train and test lists".into(),
                    ));
                }
                let mut all: Vec<usize> = train.iter().chain(test).copied().collect();
                all.sort_unstable();
                all.dedup();
                if all.len() != train.len() + test.len() {
                    return Err(Error::Validation(
                        "explicit train/test lists must be disjoint".into(),
                    ));
                }
                if all.last().copied().unwrap_or(0) >= total_steps {
                    return Err(Error::Validation(format!(
                        "split references step {} but the sequence has {total_steps} steps",
                        all.last().unwrap()
                    )));
                }
                if train.iter().max() >= test.iter().min() {
                    return Err(Error::Validation(
                        "train steps must all precede test steps".into(),
                    ));
                }
                let mut train = train.clone();
                let mut test = test.clone();
                train.sort_unstable();
                test.sort_unstable();
                Ok((train, test))
            }
        }
    }
}

/// When the optimizer applies accumulated gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateGranularity {
    /// One update per backpropagation window (default: per snapshot).
    PerStep,
    /// Accumulate over the whole epoch, one update at its end.
    PerEpochSum,
}

/// Everything a reproducible run needs, minus the data location.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct ExperimentConfig {
    pub framework: String,
    pub norm: String,
    pub norm_scale: f64,
    pub dim: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Negative-term weight in the loss (distinct from weight decay).
    pub loss_lambda: f64,
    /// Negatives sampled per positive edge during training.
    pub per_positive: usize,
    pub split: SplitSpec,
    pub seeds: Vec<u64>,
    /// Steps between gradient barriers; 1 detaches after every snapshot.
    pub bptt_window: usize,
    pub update_granularity: UpdateGranularity,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            framework: "dyn-gcn".into(),
            norm: "fn".into(),
            norm_scale: 1.0,
            dim: 32,
            dropout: 0.25,
            epochs: 100,
            lr: 0.01,
            weight_decay: 5e-7,
            loss_lambda: 1.0,
            per_positive: 1,
            split: SplitSpec::Ratio80,
            seeds: vec![0, 1, 2, 3, 4],
            bptt_window: 1,
            update_granularity: UpdateGranularity::PerStep,
        }
    }
}

impl ExperimentConfig {
    pub fn framework_kind(&self) -> Result<Framework> {
        Framework::parse(&self.framework)
    }

    pub fn norm_kind(&self) -> Result<NormKind> {
        NormKind::parse(&self.norm, self.norm_scale)
    }

    pub fn validate(&self) -> Result<()> {
        self.framework_kind()?;
        self.norm_kind()?;
        if self.seeds.is_empty() {
            return Err(Error::Validation("seeds must be non-empty".into()));
        }
        if self.bptt_window == 0 {
            return Err(Error::Validation("bptt-window must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be >= 1".into()));
        }
        if self.dim == 0 {
            return Err(Error::Validation("dim must be >= 1".into()));
        }
        Ok(())
    }

    /// Stable fingerprint of the resolved configuration (FNV-1a over the
    /// canonical JSON encoding).
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
