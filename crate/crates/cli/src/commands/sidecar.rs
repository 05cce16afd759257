//! `citl sidecar`: offline conformal analysis of a probability dump. Fits
//! the threshold on the dump's calibration prefix and reports prediction
//! sets, set-size weights, the prune list, and empirical coverage against
//! the finite-sample band.

use std::fs;
use std::io::BufReader;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use citl_core::conformal::{
    empirical_coverage, fit_quantile, predict_set, score, NonconformityMethod, QuantileValue,
};

use crate::outputs::{config_hash, file_checksum, out_root, write_atomic};
use crate::probs_io::read_dump;

#[derive(Serialize)]
struct SetRecord {
    index: usize,
    members: Vec<usize>,
    cardinality: usize,
    weight: f64,
    contains_label: bool,
}

#[derive(Serialize)]
struct SidecarReport {
    format: String,
    version: u32,
    method: NonconformityMethod,
    alpha: f64,
    classes: usize,
    calibration_count: usize,
    evaluated_count: usize,
    q_hat: QuantileValue,
    empirical_coverage: f64,
    coverage_band: [f64; 2],
    within_band: bool,
    pruned_count: usize,
    pruned_indices: Vec<usize>,
    uncertainty_fraction: f64,
    mean_set_size: f64,
}

pub fn run(
    dump_path: &Path,
    alpha: f64,
    method_flag: Option<&str>,
    calib_fraction: f64,
    calib_count: Option<usize>,
    out: Option<&Path>,
) -> Result<u8> {
    if !(alpha > 0.0 && alpha < 1.0) {
        bail!("alpha {alpha} outside (0, 1)");
    }
    let file = fs::File::open(dump_path)
        .with_context(|| format!("opening dump {}", dump_path.display()))?;
    let parsed = read_dump(&mut BufReader::new(file))?;
    if !parsed.rejections.is_empty() {
        eprintln!(
            "{} of {} records violate the probability-vector invariant:",
            parsed.rejections.len(),
            parsed.rejections.len() + parsed.rows.len()
        );
        for rejection in parsed.rejections.iter().take(20) {
            eprintln!("  record {}: {}", rejection.index, rejection.reason);
        }
        if parsed.rejections.len() > 20 {
            eprintln!("  ... and {} more", parsed.rejections.len() - 20);
        }
        return Ok(1);
    }

    let method = match method_flag {
        Some("lac") => NonconformityMethod::Lac,
        Some("aps") => NonconformityMethod::Aps,
        Some(other) => bail!("unknown method {other:?} (expected lac or aps)"),
        None => parsed
            .header
            .method
            .context("dump header carries no method; pass --method")?,
    };

    let total = parsed.rows.len();
    let prefix = match calib_count {
        Some(count) => count,
        None => {
            if !(calib_fraction > 0.0 && calib_fraction < 1.0) {
                bail!("calib fraction {calib_fraction} outside (0, 1)");
            }
            ((total as f64) * calib_fraction).ceil() as usize
        }
    };
    if prefix == 0 || prefix >= total {
        bail!("calibration prefix {prefix} must be in [1, {}]", total - 1);
    }

    let (calibration, remainder) = parsed.rows.split_at(prefix);
    let scores: Vec<f64> = calibration
        .iter()
        .map(|(p, y)| score(method, p, *y))
        .collect::<citl_core::Result<_>>()?;
    let quantile = fit_quantile(&scores, alpha, method)?;

    let mut set_records = Vec::with_capacity(remainder.len());
    let mut sets = Vec::with_capacity(remainder.len());
    let mut labels = Vec::with_capacity(remainder.len());
    let mut pruned_indices = Vec::new();
    for (offset, (probs, label)) in remainder.iter().enumerate() {
        let set = predict_set(probs, &quantile)?;
        let index = prefix + offset;
        if set.is_empty() {
            pruned_indices.push(index);
        }
        set_records.push(SetRecord {
            index,
            members: set.members().to_vec(),
            cardinality: set.cardinality(),
            weight: set.weight(),
            contains_label: set.contains(*label),
        });
        labels.push(*label);
        sets.push(set);
    }
    let coverage = empirical_coverage(&sets, &labels)?;
    let band = [
        1.0 - alpha,
        1.0 - alpha + 1.0 / (calibration.len() as f64 + 1.0),
    ];
    let uncertain = sets.iter().filter(|s| s.cardinality() > 1).count();
    let mean_set_size =
        sets.iter().map(|s| s.cardinality() as f64).sum::<f64>() / sets.len() as f64;

    let report = SidecarReport {
        format: "citl-sidecar-report".into(),
        version: 1,
        method,
        alpha,
        classes: parsed.header.classes,
        calibration_count: calibration.len(),
        evaluated_count: remainder.len(),
        q_hat: quantile.q_hat,
        empirical_coverage: coverage,
        coverage_band: band,
        within_band: coverage >= band[0] && coverage <= band[1],
        pruned_count: pruned_indices.len(),
        pruned_indices,
        uncertainty_fraction: uncertain as f64 / sets.len() as f64,
        mean_set_size,
    };

    let key = (
        file_checksum(dump_path)?,
        format!("{method}"),
        alpha.to_bits(),
        prefix,
    );
    let dir = out_root(out).join("sidecar").join(config_hash(&key));
    let mut sets_buf = Vec::new();
    for record in &set_records {
        sets_buf.extend_from_slice(serde_json::to_string(record)?.as_bytes());
        sets_buf.push(b'\n');
    }
    write_atomic(&dir.join("sets.jsonl"), &sets_buf)?;
    write_atomic(
        &dir.join("report.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;

    println!(
        "sidecar: {method} alpha={alpha} n_cal={} q_hat={} coverage={coverage:.4} band=[{:.4},{:.4}] pruned={} -> {}",
        report.calibration_count,
        serde_json::to_string(&report.q_hat)?,
        band[0],
        band[1],
        report.pruned_count,
        dir.display()
    );
    Ok(0)
}
