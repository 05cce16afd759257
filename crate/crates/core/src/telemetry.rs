//! Line-delimited telemetry records: one per training step and one per
//! epoch, behind a header, with a stable field schema shared by method and
//! baseline runs (conformal fields are `null` where not applicable).

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::conformal::QuantileValue;
use crate::error::{Error, Result};

pub const TELEMETRY_FORMAT: &str = "citl-telemetry";
pub const TELEMETRY_VERSION: u32 = 1;

/// Validation metrics computed on the post-calibration remainder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    /// Unweighted loss under the run's configured loss kind.
    pub loss: f64,
    /// Per-class one-vs-rest accuracy, averaged.
    pub macro_accuracy: f64,
    /// Plain (micro) accuracy.
    pub accuracy: f64,
    /// Mean IoU; `None` outside dense mode.
    pub miou: Option<f64>,
    /// Per-class recall; `None` for classes absent from the remainder.
    pub per_class_recall: Vec<Option<f64>>,
}

/// One optimizer step (or skipped batch).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    /// Global step index across the run, counting skipped batches.
    pub step: u64,
    /// Threshold in force for this step; `None` when no calibrator exists.
    pub q_hat: Option<QuantileValue>,
    /// Share of this batch's examples with empty prediction sets.
    pub pruned_fraction: f64,
    /// Mean raw set size over the batch (1.0 when weighting is disabled).
    pub mean_raw_weight: f64,
    pub batch_examples: usize,
    /// True when the whole batch was pruned and no update was applied.
    pub skipped: bool,
    pub wall_ns: u64,
}

/// One validate-then-train epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Threshold fit by this epoch's validation pass.
    pub q_hat: Option<QuantileValue>,
    /// Mean raw set size per class over the epoch's training examples
    /// (pruned examples count as zero); all 1.0 when weighting is disabled.
    pub per_class_mean_weight: Vec<f64>,
    /// Max minus min of `per_class_mean_weight`.
    pub weight_range: f64,
    /// Share of training examples with empty sets this epoch.
    pub pruned_fraction: f64,
    /// Share of validation-remainder examples with sets larger than one.
    pub uncertainty_fraction: Option<f64>,
    pub val: ValMetrics,
    pub lr: f64,
    pub train_examples: usize,
    pub mean_step_wall_ns: f64,
}

/// Everything a run emits, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TelemetryRecord {
    Header {
        format: String,
        version: u32,
        run_kind: String,
        config_hash: String,
    },
    Step(StepRecord),
    Epoch(EpochRecord),
    Result {
        best_epoch: usize,
        best_metric: f64,
        selection: String,
        epochs_run: usize,
        mean_step_wall_ns: f64,
    },
    /// Written when a numeric error aborted the run; earlier records are
    /// still valid.
    Abort {
        epoch: usize,
        step: u64,
        message: String,
    },
}

impl TelemetryRecord {
    pub fn header(run_kind: &str, config_hash: &str) -> Self {
        TelemetryRecord::Header {
            format: TELEMETRY_FORMAT.into(),
            version: TELEMETRY_VERSION,
            run_kind: run_kind.into(),
            config_hash: config_hash.into(),
        }
    }

    /// Zero the wall-clock fields so series can be compared for determinism.
    pub fn strip_timing(&mut self) {
        match self {
            TelemetryRecord::Step(s) => s.wall_ns = 0,
            TelemetryRecord::Epoch(e) => e.mean_step_wall_ns = 0.0,
            TelemetryRecord::Result {
                mean_step_wall_ns, ..
            } => *mean_step_wall_ns = 0.0,
            _ => {}
        }
    }
}

/// Serialize records as JSON lines.
pub fn write_records(out: &mut impl Write, records: &[TelemetryRecord]) -> Result<()> {
    for record in records {
        writeln!(out, "{}", serde_json::to_string(record).expect("telemetry"))?;
    }
    Ok(())
}

/// Parse a telemetry stream, validating the leading header.
pub fn read_records(input: &mut impl BufRead) -> Result<Vec<TelemetryRecord>> {
    let mut records = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TelemetryRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("bad telemetry at line {}: {e}", lineno + 1)))?;
        if lineno == 0 {
            match &record {
                TelemetryRecord::Header {
                    format, version, ..
                } => {
                    if format != TELEMETRY_FORMAT {
                        return Err(Error::Format(format!(
                            "unexpected telemetry format marker {format:?}"
                        )));
                    }
                    if *version != TELEMETRY_VERSION {
                        return Err(Error::Format(format!(
                            "unsupported telemetry version {version} (supported: {TELEMETRY_VERSION})"
                        )));
                    }
                }
                _ => {
                    return Err(Error::Format(
                        "telemetry stream must start with a header record".into(),
                    ))
                }
            }
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::Format("empty telemetry stream".into()));
    }
    Ok(records)
}
