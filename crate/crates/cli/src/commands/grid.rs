//! `citl grid`: alpha x noise x seed sweep with per-cell records, a summary
//! table, and the best-alpha row per noise level.

use std::fs;
use std::path::Path;
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use citl_core::data::{generate, generate_dense, DatasetSpec};
use citl_core::net::LossKind;
use citl_core::trainer::{SelectionRule, TrainConfig};

use crate::commands::run::{execute, RunConfigFile, RunKind};
use crate::dataset_io::{write_dataset, LoadedDataset};
use crate::outputs::{config_hash, out_root, write_atomic};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanFile {
    #[serde(default = "default_name")]
    pub name: String,
    /// Base dataset spec; `noise_rate` and `seed` are overridden per cell.
    pub dataset: DatasetSpec,
    /// Method alphas; may be empty for a baseline-only plan.
    #[serde(default)]
    pub alphas: Vec<f64>,
    pub noise_levels: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Baselines to include: "cross_entropy" and/or "focal".
    #[serde(default = "default_baselines")]
    pub baselines: Vec<String>,
    #[serde(default = "default_focal_gamma")]
    pub focal_gamma: f64,
    /// Base training settings; `alpha`, `seed`, `loss`, and the selection
    /// rule are overridden per cell.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

fn default_name() -> String {
    "grid".into()
}
fn default_baselines() -> Vec<String> {
    vec!["cross_entropy".into()]
}
fn default_focal_gamma() -> f64 {
    2.0
}
fn default_parallelism() -> usize {
    2
}

#[derive(Debug, Clone)]
struct CellSpec {
    noise: f64,
    seed: u64,
    /// `None` plus a baseline name, or a method alpha.
    alpha: Option<f64>,
    baseline: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
struct CellResult {
    noise: f64,
    seed: u64,
    kind: String,
    alpha: Option<f64>,
    status: String,
    metric: Option<f64>,
    best_epoch: Option<usize>,
    mean_step_wall_ns: Option<f64>,
    run_dir: String,
}

fn median(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(values[values.len() / 2])
}

pub fn run(plan_path: &Path, out: Option<&Path>, parallelism: Option<usize>) -> Result<u8> {
    let text = fs::read_to_string(plan_path)
        .with_context(|| format!("reading plan {}", plan_path.display()))?;
    let plan: PlanFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing plan {}", plan_path.display()))?;
    if plan.noise_levels.is_empty() {
        bail!("plan needs at least one noise level");
    }
    if plan.seeds.is_empty() {
        bail!("plan needs at least one seed");
    }
    if plan.alphas.is_empty() && plan.baselines.is_empty() {
        bail!("plan needs method alphas, baselines, or both");
    }
    for baseline in &plan.baselines {
        if baseline != "cross_entropy" && baseline != "focal" {
            bail!("unknown baseline {baseline:?} (expected cross_entropy or focal)");
        }
    }
    plan.train.validate().context("validating plan train config")?;

    let root = out_root(out);
    let plan_hash = config_hash(&plan);
    let grid_dir = root.join("grids").join(&plan_hash);
    fs::create_dir_all(&grid_dir)?;

    // Generate (or reuse) one dataset per (noise, seed).
    let mut datasets = std::collections::BTreeMap::new();
    for &noise in &plan.noise_levels {
        for &seed in &plan.seeds {
            let mut spec = plan.dataset.clone();
            spec.noise_rate = noise;
            spec.seed = plan.dataset.seed.wrapping_add(seed);
            spec.validate().context("validating per-cell dataset spec")?;
            let hash = config_hash(&spec);
            let dir = root.join("datasets").join(&hash);
            if !dir.join("manifest.json").exists() {
                let dataset = if spec.is_dense() {
                    LoadedDataset::Dense(generate_dense(&spec)?)
                } else {
                    LoadedDataset::Flat(generate(&spec)?)
                };
                write_dataset(&dir, &dataset, &hash)?;
            }
            datasets.insert((noise.to_bits(), seed), dir);
        }
    }

    let mut cells: Vec<CellSpec> = Vec::new();
    for &noise in &plan.noise_levels {
        for &seed in &plan.seeds {
            for baseline in &plan.baselines {
                cells.push(CellSpec {
                    noise,
                    seed,
                    alpha: None,
                    baseline: Some(baseline.clone()),
                });
            }
            for &alpha in &plan.alphas {
                cells.push(CellSpec {
                    noise,
                    seed,
                    alpha: Some(alpha),
                    baseline: None,
                });
            }
        }
    }

    let workers = parallelism.unwrap_or(plan.parallelism).max(1);
    let next = Mutex::new(0usize);
    let results: Mutex<Vec<CellResult>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let cell = {
                    let mut guard = next.lock().unwrap();
                    if *guard >= cells.len() {
                        return;
                    }
                    let cell = cells[*guard].clone();
                    *guard += 1;
                    cell
                };
                let dataset_dir = datasets[&(cell.noise.to_bits(), cell.seed)].clone();
                let mut train = plan.train.clone();
                train.seed = cell.seed;
                let (kind, kind_name) = match (&cell.alpha, &cell.baseline) {
                    (Some(alpha), _) => {
                        train.alpha = *alpha;
                        train.selection_rule = SelectionRule::MaxValAccuracy;
                        (RunKind::Method, "method".to_string())
                    }
                    (None, Some(name)) => {
                        if name == "focal" {
                            train.loss = LossKind::Focal {
                                gamma: plan.focal_gamma,
                            };
                        } else {
                            train.loss = LossKind::CrossEntropy;
                        }
                        (RunKind::Baseline, format!("baseline_{name}"))
                    }
                    (None, None) => unreachable!("cell has alpha or baseline"),
                };
                let config = RunConfigFile {
                    dataset: dataset_dir,
                    kind,
                    train,
                };
                let run_hash = config_hash(&config);
                let run_dir = root.join("runs").join(&run_hash);
                let outcome = execute(&config, &run_dir, false);
                let result = match outcome {
                    Ok(executed) => {
                        let metric = if executed.record.status == "completed" {
                            executed
                                .record
                                .test_miou
                                .or(executed.record.test_macro_accuracy)
                        } else {
                            None
                        };
                        CellResult {
                            noise: cell.noise,
                            seed: cell.seed,
                            kind: kind_name,
                            alpha: cell.alpha,
                            status: if executed.record.status == "completed" {
                                "completed".into()
                            } else {
                                "aborted".into()
                            },
                            metric,
                            best_epoch: executed.record.best_epoch,
                            mean_step_wall_ns: executed.record.mean_step_wall_ns,
                            run_dir: executed.dir.display().to_string(),
                        }
                    }
                    Err(err) => CellResult {
                        noise: cell.noise,
                        seed: cell.seed,
                        kind: kind_name,
                        alpha: cell.alpha,
                        status: format!("failed: {err:#}"),
                        metric: None,
                        best_epoch: None,
                        mean_step_wall_ns: None,
                        run_dir: String::new(),
                    },
                };
                results.lock().unwrap().push(result);
            });
        }
    });
    let mut results = results.into_inner().unwrap();
    results.sort_by(|a, b| {
        (a.noise, a.alpha.unwrap_or(-1.0), a.seed)
            .partial_cmp(&(b.noise, b.alpha.unwrap_or(-1.0), b.seed))
            .unwrap()
    });

    // Per-cell CSV.
    let mut cells_csv = String::from(
        "noise,seed,kind,alpha,status,metric,best_epoch,mean_step_wall_ns,run_dir\n",
    );
    for r in &results {
        cells_csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.noise,
            r.seed,
            r.kind,
            r.alpha.map(|a| a.to_string()).unwrap_or_default(),
            r.status.replace(',', ";"),
            r.metric.map(|m| m.to_string()).unwrap_or_default(),
            r.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
            r.mean_step_wall_ns
                .map(|n| format!("{n:.0}"))
                .unwrap_or_default(),
            r.run_dir
        ));
    }
    write_atomic(&grid_dir.join("cells.csv"), cells_csv.as_bytes())?;

    // Summary: per (noise, alpha) the median method metric, plus baseline
    // medians; delta against the cross-entropy baseline when both exist.
    let has_methods = !plan.alphas.is_empty();
    let has_ce = plan.baselines.iter().any(|b| b == "cross_entropy");
    let ce_median = |noise: f64| {
        median(
            results
                .iter()
                .filter(|r| r.noise == noise && r.kind == "baseline_cross_entropy")
                .filter_map(|r| r.metric)
                .collect(),
        )
    };

    let mut summary_csv = String::from(if has_methods && has_ce {
        "noise,alpha,baseline,method,delta\n"
    } else if has_methods {
        "noise,alpha,method\n"
    } else {
        "noise,baseline_kind,baseline\n"
    });
    let mut best_rows: Vec<String> = Vec::new();
    for &noise in &plan.noise_levels {
        let baseline_med = ce_median(noise);
        let mut best: Option<(f64, f64)> = None;
        for &alpha in &plan.alphas {
            let method_med = median(
                results
                    .iter()
                    .filter(|r| r.noise == noise && r.alpha == Some(alpha))
                    .filter_map(|r| r.metric)
                    .collect(),
            );
            if let Some(m) = method_med {
                if best.is_none() || m > best.unwrap().1 {
                    best = Some((alpha, m));
                }
            }
            match (has_ce, method_med, baseline_med) {
                (true, Some(m), Some(b)) => summary_csv.push_str(&format!(
                    "{noise},{alpha},{b},{m},{}\n",
                    m - b
                )),
                (true, m, b) => summary_csv.push_str(&format!(
                    "{noise},{alpha},{},{},\n",
                    b.map(|v| v.to_string()).unwrap_or_default(),
                    m.map(|v| v.to_string()).unwrap_or_default()
                )),
                (false, m, _) => summary_csv.push_str(&format!(
                    "{noise},{alpha},{}\n",
                    m.map(|v| v.to_string()).unwrap_or_default()
                )),
            }
        }
        if !has_methods {
            for baseline in &plan.baselines {
                let med = median(
                    results
                        .iter()
                        .filter(|r| r.noise == noise && r.kind == format!("baseline_{baseline}"))
                        .filter_map(|r| r.metric)
                        .collect(),
                );
                summary_csv.push_str(&format!(
                    "{noise},{baseline},{}\n",
                    med.map(|v| v.to_string()).unwrap_or_default()
                ));
            }
        }
        if let Some((alpha, method_med)) = best {
            match baseline_med {
                Some(b) if has_ce => best_rows.push(format!(
                    "{noise},{alpha},{b},{method_med},{}",
                    method_med - b
                )),
                _ => best_rows.push(format!("{noise},{alpha},,{method_med},")),
            }
        }
    }
    write_atomic(&grid_dir.join("summary.csv"), summary_csv.as_bytes())?;
    if has_methods {
        let mut best_csv = String::from("noise,alpha,baseline,method,delta\n");
        for row in &best_rows {
            best_csv.push_str(row);
            best_csv.push('\n');
        }
        write_atomic(&grid_dir.join("best_alpha.csv"), best_csv.as_bytes())?;
    }

    let failed = results.iter().filter(|r| r.status != "completed").count();
    println!(
        "grid {plan_hash}: {} cells, {failed} failed; tables at {}",
        results.len(),
        grid_dir.display()
    );
    Ok(if failed > 0 { 3 } else { 0 })
}
