//! Timestamped edge-list parsing, snapshot slicing, and the on-disk
//! snapshot store.
//!
//! Input format is KONECT-style whitespace-separated text: columns
//! `src dst [weight] [timestamp]`, with `%` or `#` comment lines.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_snapshot, Snapshot};

const SECONDS_PER_DAY: i64 = 86_400;
const STORE_VERSION: u32 = 1;

/// One interaction record after id mapping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeRecord {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
    /// Seconds since epoch.
    pub timestamp: i64,
}

/// A loaded dataset: timestamp-sorted records with dense node ids assigned
/// in first-appearance order, so node `i`'s first-seen time is
/// non-decreasing in `i`.
#[derive(Debug, Clone)]
pub struct TemporalEdgeList {
    pub records: Vec<EdgeRecord>,
    /// External id of each dense node index, in first-appearance order.
    pub external_ids: Vec<u64>,
}

impl TemporalEdgeList {
    pub fn num_nodes(&self) -> usize {
        self.external_ids.len()
    }
}

/// Supported input formats. Only KONECT-style text for now.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeListFormat {
    Konect,
}

pub fn load_edge_list(path: &Path, _format: EdgeListFormat) -> Result<TemporalEdgeList> {
    let text = fs::read_to_string(path)?;
    let path_str = path.display().to_string();

    // (src, dst, weight, timestamp, file position)
    let mut raw: Vec<(u64, u64, f64, i64, usize)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_num = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('%') || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        let parse_err = |message: String| Error::Parse {
            path: path_str.clone(),
            line: line_num,
            message,
        };
        if fields.len() < 2 || fields.len() > 4 {
            return Err(parse_err(format!(
                "expected 2-4 whitespace-separated fields, found {}",
                fields.len()
            )));
        }
        let src: u64 = fields[0]
            .parse()
            .map_err(|_| parse_err(format!("invalid source id {:?}", fields[0])))?;
        let dst: u64 = fields[1]
            .parse()
            .map_err(|_| parse_err(format!("invalid target id {:?}", fields[1])))?;
        let (weight, timestamp) = match fields.len() {
            2 => (1.0, 0i64),
            3 => {
                let w: f64 = fields[2]
                    .parse()
                    .map_err(|_| parse_err(format!("invalid weight {:?}", fields[2])))?;
                (w, 0i64)
            }
            _ => {
                let w: f64 = fields[2]
                    .parse()
                    .map_err(|_| parse_err(format!("invalid weight {:?}", fields[2])))?;
                let ts: i64 = fields[3]
                    .parse()
                    .map_err(|_| parse_err(format!("invalid timestamp {:?}", fields[3])))?;
                (w, ts)
            }
        };
        if !weight.is_finite() || weight < 0.0 {
            return Err(parse_err(format!("weight {weight} must be finite and >= 0")));
        }
        if timestamp < 0 {
            return Err(parse_err(format!("negative timestamp {timestamp}")));
        }
        raw.push((src, dst, weight, timestamp, raw.len()));
    }

    // Non-monotone timestamps are tolerated: stable sort, ties keep file order.
    raw.sort_by_key(|r| (r.3, r.4));

    let mut id_map: HashMap<u64, usize> = HashMap::new();
    let mut external_ids = Vec::new();
    let mut records = Vec::with_capacity(raw.len());
    for (src, dst, weight, timestamp, _) in raw {
        let mut dense = |ext: u64| -> usize {
            *id_map.entry(ext).or_insert_with(|| {
                external_ids.push(ext);
                external_ids.len() - 1
            })
        };
        let s = dense(src);
        let d = dense(dst);
        records.push(EdgeRecord {
            src: s,
            dst: d,
            weight,
            timestamp,
        });
    }
    Ok(TemporalEdgeList {
        records,
        external_ids,
    })
}

/// How to cut the record stream into snapshots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceConfig {
    pub target_edges_per_slice: usize,
    /// Once the target is met, extend the slice to the end of the current
    /// UTC day before cutting.
    pub day_boundary_rule: bool,
    pub max_steps: Option<usize>,
}

impl Default for SliceConfig {
    fn default() -> Self {
        SliceConfig {
            target_edges_per_slice: 2000,
            day_boundary_rule: true,
            max_steps: None,
        }
    }
}

/// Ordered snapshots plus the raw per-slice record counts (snapshots merge
/// duplicate pairs, so merged edge counts can be smaller).
#[derive(Debug, Clone)]
pub struct SnapshotSequence {
    pub snapshots: Vec<Snapshot>,
    pub record_counts: Vec<usize>,
    pub warnings: Vec<String>,
}

impl SnapshotSequence {
    pub fn num_steps(&self) -> usize {
        self.snapshots.len()
    }

    pub fn total_records(&self) -> usize {
        self.record_counts.iter().sum()
    }

    pub fn final_num_nodes(&self) -> usize {
        self.snapshots.last().map_or(0, |s| s.num_nodes)
    }
}

/// Greedy slicing: accumulate records until the count reaches the target,
/// then (under the day rule) keep consuming records that fall on the same
/// UTC day before cutting. `num_nodes` of each snapshot is the cumulative
/// count of nodes seen through that slice.
pub fn slice(t: &TemporalEdgeList, cfg: &SliceConfig) -> Result<SnapshotSequence> {
    if cfg.target_edges_per_slice == 0 {
        return Err(Error::Validation(
            "target_edges_per_slice must be >= 1".into(),
        ));
    }
    if t.records.is_empty() {
        return Err(Error::Validation("cannot slice an empty record list".into()));
    }
    let mut warnings = Vec::new();
    if cfg.target_edges_per_slice > t.records.len() {
        warnings.push(format!(
            "slice target {} exceeds total record count {}; producing a single snapshot",
            cfg.target_edges_per_slice,
            t.records.len()
        ));
    }

    let mut cuts: Vec<usize> = Vec::new(); // exclusive end index of each slice
    let mut start = 0usize;
    let records = &t.records;
    while start < records.len() {
        if let Some(max) = cfg.max_steps {
            if cuts.len() + 1 == max {
                cuts.push(records.len());
                break;
            }
        }
        let mut end = (start + cfg.target_edges_per_slice).min(records.len());
        if cfg.day_boundary_rule && end < records.len() {
            let day_end = (records[end - 1].timestamp.div_euclid(SECONDS_PER_DAY) + 1)
                * SECONDS_PER_DAY;
            while end < records.len() && records[end].timestamp < day_end {
                end += 1;
            }
        }
        cuts.push(end);
        start = end;
    }

    let mut snapshots = Vec::with_capacity(cuts.len());
    let mut record_counts = Vec::with_capacity(cuts.len());
    let mut seen_nodes = 0usize;
    let mut first_seen: Vec<usize> = Vec::new();
    let mut begin = 0usize;
    for (step, &end) in cuts.iter().enumerate() {
        let slice_records = &records[begin..end];
        for r in slice_records {
            // dense ids are first-appearance ordered, so the running max + 1
            // is the cumulative node count
            seen_nodes = seen_nodes.max(r.src + 1).max(r.dst + 1);
        }
        while first_seen.len() < seen_nodes {
            first_seen.push(step);
        }
        let triples: Vec<_> = slice_records
            .iter()
            .map(|r| (r.src, r.dst, r.weight))
            .collect();
        let mut snap = build_snapshot(&triples, seen_nodes)?;
        snap.index = step;
        snap.node_first_seen = first_seen.clone();
        snapshots.push(snap);
        record_counts.push(end - begin);
        begin = end;
    }

    Ok(SnapshotSequence {
        snapshots,
        record_counts,
        warnings,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreManifest {
    version: u32,
    num_steps: usize,
    num_nodes: Vec<usize>,
    record_counts: Vec<usize>,
    total_records: usize,
}

/// Write a snapshot sequence as `manifest.json` plus one `edges_NNNN.tsv`
/// per step (lines `src dst weight`, merged pairs). Deterministic output.
pub fn persist_snapshots(seq: &SnapshotSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = StoreManifest {
        version: STORE_VERSION,
        num_steps: seq.num_steps(),
        num_nodes: seq.snapshots.iter().map(|s| s.num_nodes).collect(),
        record_counts: seq.record_counts.clone(),
        total_records: seq.total_records(),
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization failed: {e}")))?;
    fs::write(dir.join("manifest.json"), manifest_json)?;
    for snap in &seq.snapshots {
        let mut out = String::new();
        for &(s, d, w) in &snap.edges {
            out.push_str(&format!("{s} {d} {w}\n"));
        }
        let mut f = fs::File::create(dir.join(format!("edges_{:04}.tsv", snap.index)))?;
        f.write_all(out.as_bytes())?;
    }
    Ok(())
}

pub fn load_snapshots(dir: &Path) -> Result<SnapshotSequence> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::Format(format!(
            "no snapshot store at {}: manifest.json missing",
            dir.display()
        )));
    }
    let manifest: StoreManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)
        .map_err(|e| Error::Format(format!("invalid manifest: {e}")))?;
    if manifest.version != STORE_VERSION {
        return Err(Error::Format(format!(
            "snapshot store version {} unsupported (expected {})",
            manifest.version, STORE_VERSION
        )));
    }
    let mut snapshots = Vec::with_capacity(manifest.num_steps);
    // first-seen step is derivable from the cumulative node counts
    let mut first_seen: Vec<usize> = Vec::new();
    for (step, &n) in manifest.num_nodes.iter().enumerate() {
        while first_seen.len() < n {
            first_seen.push(step);
        }
        let path = dir.join(format!("edges_{step:04}.tsv"));
        let text = fs::read_to_string(&path)?;
        let mut triples = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            let parse_err = |message: String| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                message,
            };
            if fields.len() != 3 {
                return Err(parse_err("expected 3 fields".into()));
            }
            let s: usize = fields[0]
                .parse()
                .map_err(|_| parse_err(format!("invalid src {:?}", fields[0])))?;
            let d: usize = fields[1]
                .parse()
                .map_err(|_| parse_err(format!("invalid dst {:?}", fields[1])))?;
            let w: f64 = fields[2]
                .parse()
                .map_err(|_| parse_err(format!("invalid weight {:?}", fields[2])))?;
            triples.push((s, d, w));
        }
        let mut snap = build_snapshot(&triples, n)?;
        snap.index = step;
        snap.node_first_seen = first_seen.clone();
        snapshots.push(snap);
    }
    Ok(SnapshotSequence {
        snapshots,
        record_counts: manifest.record_counts,
        warnings: Vec::new(),
    })
}
