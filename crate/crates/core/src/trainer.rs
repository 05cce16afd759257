//! The conformal-in-the-loop training loop.
//!
//! Each epoch is a validation pass followed by a training pass. The
//! validation pass streams the calibration prefix through the current model,
//! fits the conformal threshold from those scores, and then computes metrics
//! and uncertainty telemetry on the remaining validation examples with that
//! fresh threshold. The training pass builds a prediction set for every
//! example in each batch and weights the example's loss by the set size:
//! empty sets prune the example, singletons behave like the baseline, larger
//! sets upweight. In `BatchMeanNormalized` mode the weights are divided by
//! the batch mean (a batch whose mean weight is zero is skipped); in
//! `Unnormalized` mode raw set sizes are used, from 0 up to the class count.
//!
//! The loop starts with a validation pass so the first training epoch
//! already has a threshold. Runs are deterministic for a fixed seed: batch
//! order depends only on `(seed, epoch)`, so a method run and a baseline run
//! see identical batches.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conformal::{
    self, CalibratedQuantile, NonconformityMethod, PredictionSet, ProbabilityVector,
};
use crate::data::{DenseDataset, LabeledExample, SplitDataset};
use crate::error::{Error, Result};
use crate::metrics::{self, ConfusionCounts};
use crate::net::{
    self, AdamConfig, AdamState, ForwardTrace, LossKind, NetParams,
};
use crate::telemetry::{EpochRecord, StepRecord, TelemetryRecord, ValMetrics};

/// How raw set-size weights become the applied batch weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingMode {
    /// Weights divided by the batch mean weight; classification default.
    BatchMeanNormalized,
    /// Raw set sizes, `0..=C`; dense-task default.
    Unnormalized,
}

/// Which validation quantity picks the best snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Maximum validation macro accuracy (mean IoU in dense mode).
    MaxValAccuracy,
    /// Minimum validation loss; the baseline rule.
    MinValLoss,
}

impl SelectionRule {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectionRule::MaxValAccuracy => "max_val_accuracy",
            SelectionRule::MinValLoss => "min_val_loss",
        }
    }
}

/// Reduce-on-plateau schedule for the learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrPlateau {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for LrPlateau {
    fn default() -> Self {
        Self {
            factor: 0.2,
            patience: 10,
            min_lr: 1e-6,
        }
    }
}

/// Everything one run needs. Missing fields in config files take these
/// defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub method: NonconformityMethod,
    pub loss: LossKind,
    pub weighting_mode: WeightingMode,
    pub lr: f64,
    pub lr_plateau: LrPlateau,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub selection_rule: SelectionRule,
    /// Hidden layer widths of the classifier.
    pub hidden_layers: Vec<usize>,
    /// Decoupled weight-decay coefficient as a fraction of the initial
    /// learning rate.
    pub weight_decay_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            method: NonconformityMethod::Lac,
            loss: LossKind::CrossEntropy,
            weighting_mode: WeightingMode::BatchMeanNormalized,
            lr: 5e-4,
            lr_plateau: LrPlateau::default(),
            early_stop_patience: 20,
            batch_size: 64,
            max_epochs: 100,
            seed: 0,
            selection_rule: SelectionRule::MaxValAccuracy,
            hidden_layers: vec![64, 64],
            weight_decay_factor: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha <= 0.0 || self.alpha >= 1.0 {
            return Err(Error::config(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::config(format!("lr {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be positive"));
        }
        if self.hidden_layers.contains(&0) {
            return Err(Error::config("hidden layer widths must be positive"));
        }
        if !(self.lr_plateau.factor > 0.0 && self.lr_plateau.factor < 1.0) {
            return Err(Error::config(format!(
                "plateau factor {} outside (0, 1)",
                self.lr_plateau.factor
            )));
        }
        if self.lr_plateau.min_lr <= 0.0 || self.lr_plateau.patience == 0 {
            return Err(Error::config("bad plateau schedule"));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::config("early_stop_patience must be positive"));
        }
        if !self.weight_decay_factor.is_finite() || self.weight_decay_factor < 0.0 {
            return Err(Error::config(format!(
                "weight_decay_factor {} must be >= 0",
                self.weight_decay_factor
            )));
        }
        self.loss.validate()?;
        Ok(())
    }
}

/// Training data as the loop consumes it. A "group" is the sampling unit of
/// one batch slot: a single example in classification mode, a whole item's
/// cells in dense mode (so a dense batch of `batch_size` items supplies many
/// per-cell examples).
#[derive(Debug, Clone)]
pub struct TrainerDataset {
    groups: Vec<Vec<LabeledExample>>,
    calibration: Vec<LabeledExample>,
    validation: Vec<LabeledExample>,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub dense: bool,
}

impl TrainerDataset {
    pub fn from_split(ds: &SplitDataset) -> Result<Self> {
        let feature_dim = ds
            .train
            .first()
            .map(|e| e.x.len())
            .ok_or_else(|| Error::config("empty train split"))?;
        Ok(Self {
            groups: ds.train.iter().cloned().map(|e| vec![e]).collect(),
            calibration: ds.calibration.clone(),
            validation: ds.validation.clone(),
            num_classes: ds.spec.classes,
            feature_dim,
            dense: false,
        })
    }

    pub fn from_dense(ds: &DenseDataset) -> Result<Self> {
        let feature_dim = ds
            .train
            .first()
            .and_then(|i| i.cells.first())
            .map(|c| c.x.len())
            .ok_or_else(|| Error::config("empty dense train split"))?;
        Ok(Self {
            groups: ds.train.iter().map(|i| i.cells.clone()).collect(),
            calibration: ds.calibration.clone(),
            validation: ds
                .validation
                .iter()
                .flat_map(|i| i.cells.iter().cloned())
                .collect(),
            num_classes: ds.spec.classes,
            feature_dim,
            dense: true,
        })
    }

    /// Total training examples (cells in dense mode).
    pub fn train_examples(&self) -> usize {
        self.groups.iter().map(|g| g.len()).sum()
    }

    pub fn calibration(&self) -> &[LabeledExample] {
        &self.calibration
    }

    pub fn validation(&self) -> &[LabeledExample] {
        &self.validation
    }

    fn check(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::config("no training data"));
        }
        if self.validation.is_empty() {
            return Err(Error::config(
                "validation remainder is empty; the calibration prefix must not cover the whole validation pass",
            ));
        }
        Ok(())
    }
}

/// Best snapshot so far under the selection rule.
#[derive(Debug, Clone)]
pub struct BestSnapshot {
    pub params: NetParams,
    pub epoch: usize,
    pub metric: f64,
}

/// Mutable state of one run.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub params: NetParams,
    optimizer: AdamState,
    adam: AdamConfig,
    /// `None` only before the first completed calibration pass.
    pub calibrator: Option<CalibratedQuantile>,
    pub epoch: usize,
    pub lr: f64,
    pub best: Option<BestSnapshot>,
    best_val_loss: f64,
    plateau_bad_epochs: usize,
    early_stop_bad_epochs: usize,
    global_step: u64,
    weighting_enabled: bool,
}

const STREAM_PARAMS: u64 = 0x100;
const STREAM_SHUFFLE_BASE: u64 = 0x200;

fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed.wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic batch-order RNG for one epoch. Depends only on the config
/// seed and the epoch index, never on the model, so method and baseline runs
/// draw identical batch sequences.
pub fn epoch_shuffle_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SHUFFLE_BASE + epoch as u64))
}

impl TrainerState {
    pub fn new(config: &TrainConfig, data: &TrainerDataset, weighting_enabled: bool) -> Result<Self> {
        config.validate()?;
        let mut layer_sizes = Vec::with_capacity(config.hidden_layers.len() + 2);
        layer_sizes.push(data.feature_dim);
        layer_sizes.extend_from_slice(&config.hidden_layers);
        layer_sizes.push(data.num_classes);
        let params = NetParams::seeded(&layer_sizes, derive_seed(config.seed, STREAM_PARAMS))?;
        let optimizer = AdamState::new(&params);
        let adam = AdamConfig {
            weight_decay: config.weight_decay_factor * config.lr,
            ..AdamConfig::default()
        };
        Ok(Self {
            params,
            optimizer,
            adam,
            calibrator: None,
            epoch: 0,
            lr: config.lr,
            best: None,
            best_val_loss: f64::INFINITY,
            plateau_bad_epochs: 0,
            early_stop_bad_epochs: 0,
            global_step: 0,
            weighting_enabled,
        })
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }
}

/// What one training epoch produced, besides the updated state. Step
/// records stream into the sink passed to [`train_epoch`] so they survive a
/// mid-epoch abort.
#[derive(Debug, Clone)]
pub struct TrainEpochStats {
    /// Number of step records this epoch appended to the sink.
    pub steps_recorded: usize,
    /// Mean raw set size per class over the epoch (pruned examples count as
    /// zero); 1.0 everywhere when weighting is off.
    pub per_class_mean_weight: Vec<f64>,
    pub weight_range: f64,
    pub pruned_fraction: f64,
    pub train_examples: usize,
    pub mean_step_wall_ns: f64,
}

fn at_coordinates(err: Error, epoch: usize, batch: usize) -> Error {
    match err {
        Error::Numeric { context, message } => Error::Numeric {
            context: format!("epoch {epoch} batch {batch}: {context}"),
            message,
        },
        other => Error::Numeric {
            context: format!("epoch {epoch} batch {batch}"),
            message: other.to_string(),
        },
    }
}

/// One pass over the training data: per batch, forward, prediction sets via
/// the current calibrator, set-size weights, and one optimizer step on the
/// weighted loss. With no calibrator (or weighting disabled) every weight is
/// one and the step is exactly the baseline step. Step records are appended
/// to `steps` as batches finish, so an abort keeps everything up to the
/// failing batch.
pub fn train_epoch(
    state: &mut TrainerState,
    data: &TrainerDataset,
    config: &TrainConfig,
    steps: &mut Vec<StepRecord>,
) -> Result<TrainEpochStats> {
    let num_classes = data.num_classes;
    let mut order: Vec<usize> = (0..data.groups.len()).collect();
    order.shuffle(&mut epoch_shuffle_rng(config.seed, state.epoch));

    let steps_before = steps.len();
    let mut weight_sums = vec![0.0f64; num_classes];
    let mut class_counts = vec![0usize; num_classes];
    let mut pruned_total = 0usize;
    let mut example_total = 0usize;
    let mut wall_total: u128 = 0;

    let conformal_active = state.weighting_enabled && state.calibrator.is_some();
    let q_hat = state.calibrator.as_ref().map(|c| c.q_hat);

    for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
        let started = Instant::now();

        let mut inputs: Vec<&[f64]> = Vec::new();
        let mut labels: Vec<usize> = Vec::new();
        for &group in chunk {
            for example in &data.groups[group] {
                inputs.push(&example.x);
                labels.push(example.y);
            }
        }
        let n = inputs.len();

        let mut traces: Vec<ForwardTrace> = Vec::with_capacity(n);
        for &x in &inputs {
            traces.push(
                state
                    .params
                    .forward_trace(x)
                    .map_err(|e| at_coordinates(e, state.epoch, batch_idx))?,
            );
        }

        let (raw_weights, pruned_in_batch) = if conformal_active {
            let calibrator = state.calibrator.as_ref().expect("conformal_active");
            let mut raw = Vec::with_capacity(n);
            let mut pruned = 0usize;
            for trace in &traces {
                let set = conformal::predict_set(trace.probs(), calibrator)
                    .map_err(|e| at_coordinates(e, state.epoch, batch_idx))?;
                if set.is_empty() {
                    pruned += 1;
                }
                raw.push(set.weight());
            }
            (raw, pruned)
        } else {
            (vec![1.0; n], 0)
        };

        for (&label, &w) in labels.iter().zip(&raw_weights) {
            weight_sums[label] += w;
            class_counts[label] += 1;
        }
        pruned_total += pruned_in_batch;
        example_total += n;

        let mean_raw = raw_weights.iter().sum::<f64>() / n as f64;
        let step_index = state.global_step;
        state.global_step += 1;

        let applied: Vec<f64> = match config.weighting_mode {
            WeightingMode::BatchMeanNormalized => {
                if mean_raw == 0.0 {
                    // Whole batch pruned: no update.
                    let wall = started.elapsed().as_nanos();
                    wall_total += wall;
                    steps.push(StepRecord {
                        epoch: state.epoch,
                        step: step_index,
                        q_hat,
                        pruned_fraction: 1.0,
                        mean_raw_weight: 0.0,
                        batch_examples: n,
                        skipped: true,
                        wall_ns: wall as u64,
                    });
                    continue;
                }
                raw_weights.iter().map(|w| w / mean_raw).collect()
            }
            WeightingMode::Unnormalized => raw_weights.clone(),
        };

        let out = net::weighted_backward_from_traces(
            &state.params,
            &inputs,
            &traces,
            &labels,
            &applied,
            n as f64,
            config.loss,
        )
        .map_err(|e| at_coordinates(e, state.epoch, batch_idx))?;
        net::optimizer_step(
            &mut state.params,
            &out.grads,
            &mut state.optimizer,
            &state.adam,
            state.lr,
        )
        .map_err(|e| at_coordinates(e, state.epoch, batch_idx))?;

        let wall = started.elapsed().as_nanos();
        wall_total += wall;
        steps.push(StepRecord {
            epoch: state.epoch,
            step: step_index,
            q_hat,
            pruned_fraction: pruned_in_batch as f64 / n as f64,
            mean_raw_weight: mean_raw,
            batch_examples: n,
            skipped: false,
            wall_ns: wall as u64,
        });
    }

    let per_class_mean_weight: Vec<f64> = (0..num_classes)
        .map(|c| {
            if class_counts[c] > 0 {
                weight_sums[c] / class_counts[c] as f64
            } else {
                0.0
            }
        })
        .collect();
    let present: Vec<f64> = (0..num_classes)
        .filter(|&c| class_counts[c] > 0)
        .map(|c| per_class_mean_weight[c])
        .collect();
    let weight_range = metrics::weight_range(&present)?;

    let steps_recorded = steps.len() - steps_before;
    Ok(TrainEpochStats {
        mean_step_wall_ns: wall_total as f64 / steps_recorded.max(1) as f64,
        steps_recorded,
        per_class_mean_weight,
        weight_range,
        pruned_fraction: pruned_total as f64 / example_total.max(1) as f64,
        train_examples: example_total,
    })
}

/// What one validation epoch produced.
#[derive(Debug, Clone)]
pub struct ValidateOutcome {
    /// Freshly fit calibrator (`None` for baseline runs); the state adopts
    /// it for the next training epoch.
    pub calibrator: Option<CalibratedQuantile>,
    pub metrics: ValMetrics,
    /// Share of validation-remainder examples with sets larger than one.
    pub uncertainty_fraction: Option<f64>,
}

/// Stream the calibration prefix through the model and fit the conformal
/// threshold, then score the remaining validation examples for metrics and
/// uncertainty telemetry with that fresh threshold. Baseline runs skip the
/// conformal parts but compute the same metrics on the same remainder.
pub fn validate_epoch(
    state: &mut TrainerState,
    calibration: &[LabeledExample],
    validation: &[LabeledExample],
    config: &TrainConfig,
    dense: bool,
) -> Result<ValidateOutcome> {
    if validation.is_empty() {
        return Err(Error::config(
            "validation remainder is empty; cannot score metrics",
        ));
    }
    let calibrator = if state.weighting_enabled {
        if calibration.is_empty() {
            return Err(Error::config(
                "calibration prefix is empty; the conformal threshold cannot be fit",
            ));
        }
        let mut scores = Vec::with_capacity(calibration.len());
        for example in calibration {
            let probs = state.params.forward(&example.x)?;
            scores.push(conformal::score(config.method, &probs, example.y)?);
        }
        Some(conformal::fit_quantile(&scores, config.alpha, config.method)?)
    } else {
        None
    };

    let mut counts = ConfusionCounts::empty(state.params.num_classes());
    let mut loss_sum = 0.0;
    let mut sets: Vec<PredictionSet> = Vec::new();
    for example in validation {
        let probs = state.params.forward(&example.x)?;
        loss_sum += net::loss_value(config.loss, &probs, example.y)?;
        counts.add(probs.argmax(), example.y);
        if let Some(cal) = &calibrator {
            sets.push(conformal::predict_set(&probs, cal)?);
        }
    }

    let uncertainty = if sets.is_empty() {
        None
    } else {
        Some(metrics::uncertainty_fraction(&sets)?)
    };
    let miou = if dense {
        Some(metrics::miou(&counts)?.miou)
    } else {
        None
    };
    let val = ValMetrics {
        loss: loss_sum / validation.len() as f64,
        macro_accuracy: metrics::macro_accuracy(&counts)?,
        accuracy: counts.plain_accuracy(),
        miou,
        per_class_recall: counts.per_class_recall(),
    };

    state.calibrator = calibrator.clone();
    Ok(ValidateOutcome {
        calibrator,
        metrics: val,
        uncertainty_fraction: uncertainty,
    })
}

/// Finished-run summary.
#[derive(Debug, Clone)]
pub struct CompletedRun {
    pub best_params: NetParams,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub final_params: NetParams,
    pub epochs_run: usize,
    pub mean_step_wall_ns: f64,
    pub selection: SelectionRule,
}

/// A numeric failure mid-run; telemetry up to this point is preserved.
#[derive(Debug)]
pub struct RunAbort {
    pub epoch: usize,
    pub step: u64,
    pub error: Error,
}

/// Telemetry plus either a completed-run summary or an abort.
#[derive(Debug)]
pub struct RunReport {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub outcome: std::result::Result<CompletedRun, RunAbort>,
}

impl RunReport {
    pub fn completed(&self) -> Option<&CompletedRun> {
        self.outcome.as_ref().ok()
    }

    /// Assemble the full record stream: header, then per epoch its step
    /// records followed by the epoch record, then the trailer.
    pub fn to_records(&self, run_kind: &str, config_hash: &str) -> Vec<TelemetryRecord> {
        let mut records = vec![TelemetryRecord::header(run_kind, config_hash)];
        let mut step_iter = self.steps.iter().peekable();
        for epoch_record in &self.epochs {
            while let Some(step) = step_iter.peek() {
                if step.epoch <= epoch_record.epoch {
                    records.push(TelemetryRecord::Step((*step).clone()));
                    step_iter.next();
                } else {
                    break;
                }
            }
            records.push(TelemetryRecord::Epoch(epoch_record.clone()));
        }
        for step in step_iter {
            records.push(TelemetryRecord::Step(step.clone()));
        }
        match &self.outcome {
            Ok(done) => records.push(TelemetryRecord::Result {
                best_epoch: done.best_epoch,
                best_metric: done.best_metric,
                selection: done.selection.as_str().into(),
                epochs_run: done.epochs_run,
                mean_step_wall_ns: done.mean_step_wall_ns,
            }),
            Err(abort) => records.push(TelemetryRecord::Abort {
                epoch: abort.epoch,
                step: abort.step,
                message: abort.error.to_string(),
            }),
        }
        records
    }
}

fn selection_metric(val: &ValMetrics, rule: SelectionRule, dense: bool) -> f64 {
    match rule {
        SelectionRule::MaxValAccuracy => {
            if dense {
                val.miou.unwrap_or(val.macro_accuracy)
            } else {
                val.macro_accuracy
            }
        }
        SelectionRule::MinValLoss => val.loss,
    }
}

fn is_better(metric: f64, best: f64, rule: SelectionRule) -> bool {
    match rule {
        SelectionRule::MaxValAccuracy => metric > best,
        SelectionRule::MinValLoss => metric < best,
    }
}

/// Run the conformal-in-the-loop method with the config's selection rule.
pub fn run_training(config: &TrainConfig, data: &TrainerDataset) -> Result<RunReport> {
    run_impl(config, data, true, config.selection_rule)
}

/// Run with weighting disabled (every weight 1, no calibration) and
/// min-validation-loss selection.
pub fn run_baseline(config: &TrainConfig, data: &TrainerDataset) -> Result<RunReport> {
    run_impl(config, data, false, SelectionRule::MinValLoss)
}

fn run_impl(
    config: &TrainConfig,
    data: &TrainerDataset,
    weighting_enabled: bool,
    selection: SelectionRule,
) -> Result<RunReport> {
    config.validate()?;
    data.check()?;
    let mut state = TrainerState::new(config, data, weighting_enabled)?;

    let mut steps: Vec<StepRecord> = Vec::new();
    let mut epochs: Vec<EpochRecord> = Vec::new();
    let mut wall_sum = 0.0f64;
    let mut wall_steps = 0usize;

    for epoch in 1..=config.max_epochs {
        state.epoch = epoch;

        let val = match validate_epoch(
            &mut state,
            &data.calibration,
            &data.validation,
            config,
            data.dense,
        ) {
            Ok(v) => v,
            Err(error) => {
                return Ok(RunReport {
                    steps,
                    epochs,
                    outcome: Err(RunAbort {
                        epoch,
                        step: state.global_step,
                        error,
                    }),
                })
            }
        };

        let metric = selection_metric(&val.metrics, selection, data.dense);
        let take_snapshot = match &state.best {
            None => true,
            Some(best) => is_better(metric, best.metric, selection),
        };
        if take_snapshot {
            state.best = Some(BestSnapshot {
                params: state.params.clone(),
                epoch,
                metric,
            });
        }

        // Plateau and early stopping both watch the unweighted validation
        // loss.
        if val.metrics.loss < state.best_val_loss {
            state.best_val_loss = val.metrics.loss;
            state.plateau_bad_epochs = 0;
            state.early_stop_bad_epochs = 0;
        } else {
            state.plateau_bad_epochs += 1;
            state.early_stop_bad_epochs += 1;
        }
        if state.plateau_bad_epochs >= config.lr_plateau.patience {
            state.lr = (state.lr * config.lr_plateau.factor).max(config.lr_plateau.min_lr);
            state.plateau_bad_epochs = 0;
        }
        if state.early_stop_bad_epochs >= config.early_stop_patience {
            break;
        }

        let stats = match train_epoch(&mut state, data, config, &mut steps) {
            Ok(s) => s,
            Err(error) => {
                return Ok(RunReport {
                    steps,
                    epochs,
                    outcome: Err(RunAbort {
                        epoch,
                        step: state.global_step,
                        error,
                    }),
                })
            }
        };

        wall_sum += stats.mean_step_wall_ns * stats.steps_recorded as f64;
        wall_steps += stats.steps_recorded;
        epochs.push(EpochRecord {
            epoch,
            q_hat: state.calibrator.as_ref().map(|c| c.q_hat),
            per_class_mean_weight: stats.per_class_mean_weight,
            weight_range: stats.weight_range,
            pruned_fraction: stats.pruned_fraction,
            uncertainty_fraction: val.uncertainty_fraction,
            val: val.metrics,
            lr: state.lr,
            train_examples: stats.train_examples,
            mean_step_wall_ns: stats.mean_step_wall_ns,
        });
    }

    let best = state.best.clone().expect("at least one validation ran");
    let epochs_run = epochs.len();
    Ok(RunReport {
        steps,
        epochs,
        outcome: Ok(CompletedRun {
            best_params: best.params,
            best_epoch: best.epoch,
            best_metric: best.metric,
            final_params: state.params,
            epochs_run,
            mean_step_wall_ns: if wall_steps > 0 {
                wall_sum / wall_steps as f64
            } else {
                0.0
            },
            selection,
        }),
    })
}

/// Model outputs over a fixed example stream, in order; the raw material of
/// an offline probability dump.
pub fn model_outputs(
    params: &NetParams,
    examples: &[LabeledExample],
) -> Result<Vec<(ProbabilityVector, usize)>> {
    examples
        .iter()
        .map(|e| Ok((params.forward(&e.x)?, e.y)))
        .collect()
}

/// Test-split evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub macro_accuracy: f64,
    pub accuracy: f64,
    pub per_class_recall: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub counts: ConfusionCounts,
}

/// Evaluate a model on labeled examples (argmax predictions).
pub fn evaluate(
    params: &NetParams,
    examples: &[LabeledExample],
    dense: bool,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::domain("cannot evaluate on zero examples"));
    }
    let mut counts = ConfusionCounts::empty(params.num_classes());
    for example in examples {
        let probs = params.forward(&example.x)?;
        counts.add(probs.argmax(), example.y);
    }
    let miou = if dense {
        Some(metrics::miou(&counts)?.miou)
    } else {
        None
    };
    Ok(EvalReport {
        macro_accuracy: metrics::macro_accuracy(&counts)?,
        accuracy: counts.plain_accuracy(),
        per_class_recall: counts.per_class_recall(),
        miou,
        counts,
    })
}
