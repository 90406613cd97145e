//! Dynamic graph embedding over snapshot sequences: two temporal GCN
//! frameworks with an L2 feature-normalization layer, link-prediction
//! evaluation, and an executable suite of smoothness diagnostics.

pub mod autodiff;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod graph;
pub mod ingest;
pub mod matrix;
pub mod models;
pub mod norms;
pub mod training;

pub use config::{ExperimentConfig, SplitSpec, UpdateGranularity};
pub use error::{Error, Result};
pub use graph::{
    build_snapshot, row_normalize, symmetric_normalize, AdjacencyFlavor, NormalizedAdjacency,
    Snapshot,
};
pub use ingest::{SliceConfig, SnapshotSequence, TemporalEdgeList};
pub use matrix::Matrix;
pub use models::{Framework, ModelCheckpoint, ModelState};
pub use norms::NormKind;
