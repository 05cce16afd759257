//! `citl report`: turn finished runs into tidy figure CSVs — weight range
//! per epoch, uncertainty per epoch, pruning and quantile per step by alpha,
//! and per-step overhead of method runs against baseline runs on the same
//! dataset and seed.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use citl_core::conformal::QuantileValue;
use citl_core::telemetry::{read_records, TelemetryRecord};

use crate::commands::run::RunRecord;
use crate::outputs::{config_hash, out_root, write_atomic};

struct LoadedRun {
    name: String,
    record: RunRecord,
    records: Vec<TelemetryRecord>,
}

fn quantile_text(q: &Option<QuantileValue>) -> String {
    match q {
        None => String::new(),
        Some(QuantileValue::Infinite) => "inf".into(),
        Some(QuantileValue::Finite(v)) => v.to_string(),
    }
}

pub fn run(run_dirs: &[PathBuf], out: Option<&Path>) -> Result<u8> {
    if run_dirs.is_empty() {
        bail!("no run directories given");
    }
    let mut runs = Vec::new();
    for dir in run_dirs {
        let record_path = dir.join("record.json");
        let record: RunRecord = serde_json::from_str(
            &fs::read_to_string(&record_path)
                .with_context(|| format!("reading {}", record_path.display()))?,
        )
        .with_context(|| format!("parsing {}", record_path.display()))?;
        let telemetry_path = dir.join(&record.telemetry);
        let file = fs::File::open(&telemetry_path)
            .with_context(|| format!("opening {}", telemetry_path.display()))?;
        let records = read_records(&mut BufReader::new(file))
            .with_context(|| format!("parsing telemetry {}", telemetry_path.display()))?;
        runs.push(LoadedRun {
            name: record.config_hash.clone(),
            record,
            records,
        });
    }

    let key: Vec<&str> = runs.iter().map(|r| r.name.as_str()).collect();
    let dir = out_root(out).join("reports").join(config_hash(&key));

    let alpha_text = |record: &RunRecord| {
        record
            .alpha
            .map(|a| a.to_string())
            .unwrap_or_default()
    };

    // Per-epoch weight range; the step column is the last step of the epoch.
    let mut weight_range = String::from("run,kind,alpha,epoch,end_step,weight_range\n");
    let mut uncertainty = String::from("run,kind,alpha,epoch,uncertainty_fraction\n");
    let mut pruned = String::from("run,kind,alpha,epoch,step,pruned_fraction\n");
    let mut quantile = String::from("run,kind,alpha,epoch,step,q_hat\n");
    for run in &runs {
        let alpha = alpha_text(&run.record);
        let mut last_step_in_epoch: std::collections::BTreeMap<usize, u64> = Default::default();
        for record in &run.records {
            if let TelemetryRecord::Step(step) = record {
                last_step_in_epoch
                    .entry(step.epoch)
                    .and_modify(|s| *s = (*s).max(step.step))
                    .or_insert(step.step);
            }
        }
        for record in &run.records {
            match record {
                TelemetryRecord::Epoch(epoch) => {
                    weight_range.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        run.name,
                        run.record.kind,
                        alpha,
                        epoch.epoch,
                        last_step_in_epoch.get(&epoch.epoch).copied().unwrap_or(0),
                        epoch.weight_range
                    ));
                    uncertainty.push_str(&format!(
                        "{},{},{},{},{}\n",
                        run.name,
                        run.record.kind,
                        alpha,
                        epoch.epoch,
                        epoch
                            .uncertainty_fraction
                            .map(|u| u.to_string())
                            .unwrap_or_default()
                    ));
                }
                TelemetryRecord::Step(step) => {
                    pruned.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        run.name, run.record.kind, alpha, step.epoch, step.step, step.pruned_fraction
                    ));
                    quantile.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        run.name,
                        run.record.kind,
                        alpha,
                        step.epoch,
                        step.step,
                        quantile_text(&step.q_hat)
                    ));
                }
                _ => {}
            }
        }
    }

    // Overhead: pair each method run with a baseline run sharing the dataset
    // and seed.
    let mut overhead = String::from(
        "method_run,baseline_run,dataset_hash,seed,method_step_ns,baseline_step_ns,ratio\n",
    );
    let mut pairs = 0usize;
    for method in runs.iter().filter(|r| r.record.kind == "method") {
        let partner = runs.iter().find(|r| {
            r.record.kind == "baseline"
                && r.record.dataset_hash == method.record.dataset_hash
                && r.record.seed == method.record.seed
                && r.record.mean_step_wall_ns.is_some()
        });
        if let (Some(method_ns), Some(baseline)) = (method.record.mean_step_wall_ns, partner) {
            let baseline_ns = baseline.record.mean_step_wall_ns.unwrap();
            overhead.push_str(&format!(
                "{},{},{},{},{:.0},{:.0},{:.4}\n",
                method.name,
                baseline.name,
                method.record.dataset_hash,
                method.record.seed,
                method_ns,
                baseline_ns,
                method_ns / baseline_ns
            ));
            pairs += 1;
        }
    }

    write_atomic(&dir.join("weight_range.csv"), weight_range.as_bytes())?;
    write_atomic(&dir.join("uncertainty.csv"), uncertainty.as_bytes())?;
    write_atomic(&dir.join("pruned_by_step.csv"), pruned.as_bytes())?;
    write_atomic(&dir.join("quantile_by_step.csv"), quantile.as_bytes())?;
    write_atomic(&dir.join("overhead.csv"), overhead.as_bytes())?;

    println!(
        "report: {} runs, {pairs} overhead pairs; figure data at {}",
        runs.len(),
        dir.display()
    );
    Ok(0)
}
