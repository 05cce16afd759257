//! `citl run`: execute one training or baseline run from a config file,
//! writing telemetry, a checkpoint, the test evaluation, and a run record.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use citl_core::net::checkpoint_to_string;
use citl_core::telemetry::write_records;
use citl_core::trainer::{
    evaluate, model_outputs, run_baseline, run_training, RunReport, TrainConfig, TrainerDataset,
};

use crate::dataset_io::{read_dataset, read_manifest, LoadedDataset};
use crate::outputs::{config_hash, out_root, write_atomic};
use crate::probs_io::write_dump;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Method,
    Baseline,
}

impl RunKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RunKind::Method => "method",
            RunKind::Baseline => "baseline",
        }
    }
}

/// The run config file: which dataset, which side of the comparison, and the
/// training settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfigFile {
    pub dataset: PathBuf,
    #[serde(default = "default_kind")]
    pub kind: RunKind,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_kind() -> RunKind {
    RunKind::Method
}

/// Summary of one finished (or aborted) run; `record.json` in the run dir.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub kind: String,
    pub status: String,
    pub seed: u64,
    pub alpha: Option<f64>,
    pub dataset_hash: String,
    pub dataset_dir: String,
    pub selection: Option<String>,
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
    pub epochs_run: usize,
    pub mean_step_wall_ns: Option<f64>,
    pub test_macro_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub test_miou: Option<f64>,
    pub telemetry: String,
}

pub const RECORD_FORMAT: &str = "citl-run-record";
pub const RECORD_VERSION: u32 = 1;

pub struct ExecutedRun {
    pub dir: PathBuf,
    pub record: RunRecord,
}

/// Shared by `run` and `grid`: execute a parsed config into `dir`.
pub fn execute(config: &RunConfigFile, dir: &Path, dump_val_probs: bool) -> Result<ExecutedRun> {
    let hash = config_hash(config);
    let manifest = read_manifest(&config.dataset)?;
    let loaded = read_dataset(&config.dataset)?;
    let (data, test_flat, dense) = match &loaded {
        LoadedDataset::Flat(ds) => (
            TrainerDataset::from_split(ds)?,
            ds.test.clone(),
            false,
        ),
        LoadedDataset::Dense(ds) => (
            TrainerDataset::from_dense(ds)?,
            ds.test
                .iter()
                .flat_map(|item| item.cells.iter().cloned())
                .collect(),
            true,
        ),
    };

    let report: RunReport = match config.kind {
        RunKind::Method => run_training(&config.train, &data)?,
        RunKind::Baseline => run_baseline(&config.train, &data)?,
    };

    let mut telemetry_buf = Vec::new();
    write_records(
        &mut telemetry_buf,
        &report.to_records(config.kind.as_str(), &hash),
    )?;
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join("telemetry.jsonl"), &telemetry_buf)?;

    let record = match &report.outcome {
        Ok(done) => {
            write_atomic(
                &dir.join("checkpoint.json"),
                checkpoint_to_string(&done.best_params).as_bytes(),
            )?;
            let eval = evaluate(&done.best_params, &test_flat, dense)?;
            write_atomic(
                &dir.join("eval.json"),
                serde_json::to_string_pretty(&eval)?.as_bytes(),
            )?;
            if dump_val_probs {
                // Calibration prefix first, then the remainder, so the
                // sidecar reproduces the in-loop fit exactly.
                let mut stream = data.calibration().to_vec();
                stream.extend_from_slice(data.validation());
                let rows = model_outputs(&done.best_params, &stream)?;
                let mut buf = Vec::new();
                write_dump(&mut buf, data.num_classes, Some(config.train.method), &rows)?;
                write_atomic(&dir.join("val_dump.jsonl"), &buf)?;
            }
            RunRecord {
                format: RECORD_FORMAT.into(),
                version: RECORD_VERSION,
                config_hash: hash.clone(),
                kind: config.kind.as_str().into(),
                status: "completed".into(),
                seed: config.train.seed,
                alpha: match config.kind {
                    RunKind::Method => Some(config.train.alpha),
                    RunKind::Baseline => None,
                },
                dataset_hash: manifest.spec_hash.clone(),
                dataset_dir: config.dataset.display().to_string(),
                selection: Some(done.selection.as_str().into()),
                best_epoch: Some(done.best_epoch),
                best_metric: Some(done.best_metric),
                epochs_run: done.epochs_run,
                mean_step_wall_ns: Some(done.mean_step_wall_ns),
                test_macro_accuracy: Some(eval.macro_accuracy),
                test_accuracy: Some(eval.accuracy),
                test_miou: eval.miou,
                telemetry: "telemetry.jsonl".into(),
            }
        }
        Err(abort) => RunRecord {
            format: RECORD_FORMAT.into(),
            version: RECORD_VERSION,
            config_hash: hash.clone(),
            kind: config.kind.as_str().into(),
            status: format!("aborted at epoch {} step {}: {}", abort.epoch, abort.step, abort.error),
            seed: config.train.seed,
            alpha: match config.kind {
                RunKind::Method => Some(config.train.alpha),
                RunKind::Baseline => None,
            },
            dataset_hash: manifest.spec_hash.clone(),
            dataset_dir: config.dataset.display().to_string(),
            selection: None,
            best_epoch: None,
            best_metric: None,
            epochs_run: report.epochs.len(),
            mean_step_wall_ns: None,
            test_macro_accuracy: None,
            test_accuracy: None,
            test_miou: None,
            telemetry: "telemetry.jsonl".into(),
        },
    };
    write_atomic(
        &dir.join("record.json"),
        serde_json::to_string_pretty(&record)?.as_bytes(),
    )?;
    Ok(ExecutedRun {
        dir: dir.to_path_buf(),
        record,
    })
}

pub fn run(config_path: &Path, out: Option<&Path>, dump_val_probs: bool) -> Result<u8> {
    let text = fs::read_to_string(config_path)
        .with_context(|| format!("reading run config {}", config_path.display()))?;
    let config: RunConfigFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing run config {}", config_path.display()))?;
    config.train.validate().context("validating train config")?;
    if !config.dataset.join("manifest.json").exists() {
        bail!(
            "dataset directory {} does not exist (run `citl generate` first)",
            config.dataset.display()
        );
    }

    let hash = config_hash(&config);
    let dir = out_root(out).join("runs").join(&hash);
    if dir.join("record.json").exists() {
        println!("run {hash} already exists at {}", dir.display());
        return Ok(0);
    }

    let executed = execute(&config, &dir, dump_val_probs)?;
    if executed.record.status == "completed" {
        println!(
            "run {hash} ({}) completed: best epoch {} metric {:.4}, test macro accuracy {:.4} -> {}",
            executed.record.kind,
            executed.record.best_epoch.unwrap_or(0),
            executed.record.best_metric.unwrap_or(f64::NAN),
            executed.record.test_macro_accuracy.unwrap_or(f64::NAN),
            executed.dir.display()
        );
        Ok(0)
    } else {
        eprintln!(
            "run {hash} ({}) {}; partial telemetry kept at {}",
            executed.record.kind,
            executed.record.status,
            executed.dir.display()
        );
        Ok(2)
    }
}
