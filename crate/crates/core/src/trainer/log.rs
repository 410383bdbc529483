//! Per-epoch training records and their CSV/JSON exports.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRAINLOG_SCHEMA_VERSION: u32 = 1;

/// CSV header, in column order. Must match the field order of
/// [`EpochRecord`].
pub const TRAINLOG_COLUMNS: [&str; 17] = [
    "epoch",
    "phase",
    "lr_body",
    "intra_loss",
    "inter_loss",
    "total_loss",
    "active_triplets",
    "affinity_built",
    "affinity_quality",
    "sigma_sq",
    "degenerate_rows",
    "skipped_anchors",
    "own_class_zero_weight",
    "floored_log_probs",
    "val_map",
    "val_rank1",
    "wall_time_ms",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub lr_body: f64,
    /// Mean per-iteration intra-camera loss (batch mean over anchors).
    pub intra_loss: f64,
    /// Mean per-iteration inter-camera loss, before the lambda factor.
    pub inter_loss: f64,
    pub total_loss: f64,
    pub active_triplets: usize,
    pub affinity_built: bool,
    pub affinity_quality: Option<f64>,
    pub sigma_sq: Option<f64>,
    pub degenerate_rows: usize,
    pub skipped_anchors: usize,
    pub own_class_zero_weight: usize,
    pub floored_log_probs: usize,
    pub val_map: Option<f64>,
    pub val_rank1: Option<f64>,
    /// The only nondeterministic column.
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub schema_version: u32,
    pub records: Vec<EpochRecord>,
    pub affinity_builds: usize,
    /// Cameras left out of triplet sampling for having fewer than 2 persons.
    pub excluded_cameras: Vec<usize>,
}

impl Default for TrainLog {
    fn default() -> Self {
        Self {
            schema_version: TRAINLOG_SCHEMA_VERSION,
            records: Vec::new(),
            affinity_builds: 0,
            excluded_cameras: Vec::new(),
        }
    }
}

impl TrainLog {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Copy with wall-clock timings zeroed, for bitwise reproducibility checks.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        for r in &mut out.records {
            r.wall_time_ms = 0.0;
        }
        out
    }

    /// Affinity-quality values of the joint epochs, in epoch order.
    pub fn affinity_quality_series(&self) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.affinity_quality.map(|q| (r.epoch, q)))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let log: TrainLog = serde_json::from_str(text)?;
        if log.schema_version != TRAINLOG_SCHEMA_VERSION {
            return Err(Error::Version {
                kind: "train log",
                found: log.schema_version.to_string(),
                expected: TRAINLOG_SCHEMA_VERSION.to_string(),
            });
        }
        Ok(log)
    }

    /// One row per epoch under a `# pcsl-trainlog <version>` comment line.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(TRAINLOG_COLUMNS)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        let body = String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
            .expect("csv output is utf-8");
        Ok(format!("# pcsl-trainlog {TRAINLOG_SCHEMA_VERSION}\n{body}"))
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(std::io::Error::other(e))
    }
}
