//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measured evidence (run with `-- --nocapture` to see them on success).
//!
//! Statistical criteria use frozen seeds so every run is reproducible;
//! independent oracles (brute-force sorts, finite differences, hand-rolled
//! confusion counting) live in this file and never call the code paths they
//! audit.

use std::collections::BTreeSet;
use std::sync::Mutex;
use std::time::Instant;

use citl_core::conformal::{
    aps_score, conformal_rank, empirical_coverage, fit_quantile, lac_score, predict_set,
    predict_set_aps, predict_set_lac, CalibratedQuantile, NonconformityMethod,
    ProbabilityVector, QuantileValue,
};
use citl_core::data::{generate, DatasetSpec, GeneratorKind};
use citl_core::metrics::{macro_accuracy, miou, ConfusionCounts};
use citl_core::net::{
    self, focal_loss, loss_value, optimizer_step, weighted_batch_backward, AdamConfig, AdamState,
    LossKind, NetParams,
};
use citl_core::trainer::{
    evaluate, run_baseline, run_training, train_epoch, LrPlateau, TrainConfig, TrainerDataset,
    TrainerState,
};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn median(mut values: Vec<f64>) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

/// Flat Dirichlet draw via normalized exponentials.
fn random_probs(rng: &mut ChaCha8Rng, classes: usize) -> ProbabilityVector {
    let draws: Vec<f64> = (0..classes)
        .map(|_| -rng.gen_range(f64::MIN_POSITIVE..1.0f64).ln())
        .collect();
    let sum: f64 = draws.iter().sum();
    ProbabilityVector::new(draws.iter().map(|d| d / sum).collect()).unwrap()
}

fn sample_label(rng: &mut ChaCha8Rng, p: &ProbabilityVector) -> usize {
    let mut u = rng.gen_range(0.0..1.0);
    for (i, &v) in p.as_slice().iter().enumerate() {
        if u < v {
            return i;
        }
        u -= v;
    }
    p.num_classes() - 1
}

// ---------------------------------------------------------------------------
// Criterion 1: split-conformal coverage on exchangeable data.
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_coverage_guarantee() {
    let started = Instant::now();
    // 50 classes keep the deterministic APS construction's over-coverage
    // (it includes the class that crosses the threshold) inside the allowed
    // slack; LAC is insensitive to the class count.
    let classes = 50;
    let n_cal = 1000;
    let n_test = 2000;
    let mut worst: f64 = 0.0;
    for method in [NonconformityMethod::Lac, NonconformityMethod::Aps] {
        for alpha in [0.05, 0.1, 0.2] {
            let mut coverages = Vec::new();
            for seed in 0..20u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed * 77 + 13);
                let mut scores = Vec::with_capacity(n_cal);
                for _ in 0..n_cal {
                    let p = random_probs(&mut rng, classes);
                    let y = sample_label(&mut rng, &p);
                    scores.push(match method {
                        NonconformityMethod::Lac => lac_score(&p, y).unwrap(),
                        NonconformityMethod::Aps => aps_score(&p, y).unwrap(),
                    });
                }
                let quantile = fit_quantile(&scores, alpha, method).unwrap();
                let mut sets = Vec::with_capacity(n_test);
                let mut labels = Vec::with_capacity(n_test);
                for _ in 0..n_test {
                    let p = random_probs(&mut rng, classes);
                    labels.push(sample_label(&mut rng, &p));
                    sets.push(predict_set(&p, &quantile).unwrap());
                }
                coverages.push(empirical_coverage(&sets, &labels).unwrap());
            }
            let med = median(coverages);
            let lo = (1.0 - alpha) - 0.02;
            let hi = (1.0 - alpha) + 1.0 / (n_cal as f64 + 1.0) + 0.02;
            assert!(
                med >= lo && med <= hi,
                "criterion 01: FAIL {method} alpha={alpha}: median coverage {med:.4} outside [{lo:.4}, {hi:.4}]"
            );
            worst = worst.max((med - (1.0 - alpha)).abs());
        }
    }
    println!(
        "criterion 01 coverage-guarantee: PASS (LAC+APS, alpha in {{.05,.1,.2}}, 20 seeds, max |median - (1-alpha)| = {worst:.4}, {:.1}s)",
        started.elapsed().as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: quantile fitting vs a brute-force order-statistic oracle.
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_quantile_oracle() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut infinite_cases = 0usize;
    for case in 0..1000 {
        let n = rng.gen_range(1..=1000);
        let alpha = rng.gen_range(0.01..0.5);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();

        // Oracle: sort a copy, index the ceil((n+1)(1-alpha))-th smallest.
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank = conformal_rank(n, alpha);
        let expected = if rank > n { None } else { Some(sorted[rank - 1]) };

        let fitted = fit_quantile(&scores, alpha, NonconformityMethod::Lac).unwrap();
        match (fitted.q_hat, expected) {
            (QuantileValue::Finite(q), Some(want)) => {
                assert_eq!(q, want, "criterion 02: FAIL case {case}: {q} != {want}")
            }
            (QuantileValue::Infinite, None) => infinite_cases += 1,
            (got, want) => panic!("criterion 02: FAIL case {case}: {got:?} vs oracle {want:?}"),
        }
    }
    println!(
        "criterion 02 quantile-oracle: PASS (1000 cases exact, {infinite_cases} infinite-sentinel cases, {:.1}s)",
        started.elapsed().as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: set semantics over 1e5 random (p, q) pairs.
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_set_semantics() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..100_000 {
        let classes = rng.gen_range(2..=12);
        let p = random_probs(&mut rng, classes);
        let q1 = rng.gen_range(0.0..1.05);
        let q2 = rng.gen_range(0.0..1.05);
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        let make = |q: f64, method| CalibratedQuantile {
            q_hat: QuantileValue::Finite(q),
            alpha: 0.1,
            n: 100,
            method,
        };

        let aps_lo = predict_set_aps(&p, &make(lo, NonconformityMethod::Aps)).unwrap();
        let aps_hi = predict_set_aps(&p, &make(hi, NonconformityMethod::Aps)).unwrap();
        assert!(!aps_lo.is_empty(), "criterion 03: FAIL: empty APS set");
        assert!(
            aps_lo.members().iter().all(|&y| aps_hi.contains(y)),
            "criterion 03: FAIL: APS not monotone in the threshold"
        );

        let lac_lo = predict_set_lac(&p, &make(lo, NonconformityMethod::Lac)).unwrap();
        let lac_hi = predict_set_lac(&p, &make(hi, NonconformityMethod::Lac)).unwrap();
        let min_score = p
            .as_slice()
            .iter()
            .map(|&v| 1.0 - v)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(
            lac_lo.is_empty(),
            min_score > lo,
            "criterion 03: FAIL: LAC emptiness rule"
        );
        assert!(
            lac_lo.members().iter().all(|&y| lac_hi.contains(y)),
            "criterion 03: FAIL: LAC not monotone in the threshold"
        );
    }
    println!(
        "criterion 03 set-semantics: PASS (1e5 pairs: APS non-empty, LAC emptiness rule, monotone sets, {:.1}s)",
        started.elapsed().as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: analytic gradients vs central finite differences.
// ---------------------------------------------------------------------------

/// Scalar weighted batch loss used by the finite-difference oracle.
fn batch_loss(
    params: &NetParams,
    batch: &[(Vec<f64>, usize)],
    weights: &[f64],
    normalizer: f64,
    loss: LossKind,
) -> f64 {
    let mut total = 0.0;
    for ((x, y), &w) in batch.iter().zip(weights) {
        let probs = params.forward(x).unwrap();
        total += w * loss_value(loss, &probs, *y).unwrap();
    }
    total / normalizer
}

#[test]
fn criterion_04_gradient_fidelity() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut checked = 0usize;
    let mut worst_rel: f64 = 0.0;
    for net_idx in 0..50 {
        let input_dim = rng.gen_range(2..=6);
        let hidden_count = rng.gen_range(0..=2);
        let classes = rng.gen_range(2..=6);
        let mut sizes = vec![input_dim];
        for _ in 0..hidden_count {
            sizes.push(rng.gen_range(3..=32));
        }
        sizes.push(classes);
        // Jitter every parameter so zero-initialized output rows also move.
        let mut params = NetParams::seeded(&sizes, rng.gen()).unwrap();
        for layer in params.layers_mut() {
            for w in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
                *w += rng.gen_range(-0.7..0.7);
            }
        }

        let loss = match net_idx % 3 {
            0 => LossKind::CrossEntropy,
            1 => LossKind::Focal { gamma: 2.0 },
            _ => LossKind::Focal { gamma: 0.5 },
        };
        let batch_n = rng.gen_range(2..=5);
        let batch: Vec<(Vec<f64>, usize)> = (0..batch_n)
            .map(|_| {
                (
                    (0..input_dim).map(|_| rng.gen_range(-1.5..1.5)).collect(),
                    rng.gen_range(0..classes),
                )
            })
            .collect();
        let weights: Vec<f64> = (0..batch_n).map(|_| rng.gen_range(0.0..2.0)).collect();
        let normalizer = batch_n as f64;

        let refs: Vec<(&[f64], usize)> = batch.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
        let analytic =
            weighted_batch_backward(&params, &refs, &weights, normalizer, loss).unwrap();

        let eps = 1e-5;
        for layer_idx in 0..params.layers().len() {
            let w_len = params.layers()[layer_idx].weights.len();
            let b_len = params.layers()[layer_idx].biases.len();
            for param_idx in 0..w_len + b_len {
                let read = |p: &NetParams| {
                    if param_idx < w_len {
                        p.layers()[layer_idx].weights[param_idx]
                    } else {
                        p.layers()[layer_idx].biases[param_idx - w_len]
                    }
                };
                let write = |p: &mut NetParams, v: f64| {
                    if param_idx < w_len {
                        p.layers_mut()[layer_idx].weights[param_idx] = v;
                    } else {
                        p.layers_mut()[layer_idx].biases[param_idx - w_len] = v;
                    }
                };
                let original = read(&params);
                write(&mut params, original + eps);
                let plus = batch_loss(&params, &batch, &weights, normalizer, loss);
                write(&mut params, original - eps);
                let minus = batch_loss(&params, &batch, &weights, normalizer, loss);
                write(&mut params, original);

                let numeric = (plus - minus) / (2.0 * eps);
                let exact = if param_idx < w_len {
                    analytic.grads.d_weights[layer_idx][param_idx]
                } else {
                    analytic.grads.d_biases[layer_idx][param_idx - w_len]
                };
                let scale = exact.abs().max(numeric.abs());
                let rel = if scale > 1e-6 {
                    (exact - numeric).abs() / scale
                } else {
                    (exact - numeric).abs()
                };
                assert!(
                    rel <= 1e-4,
                    "criterion 04: FAIL net {net_idx} layer {layer_idx} param {param_idx} ({loss:?}): analytic {exact} vs numeric {numeric} (rel {rel:.2e})"
                );
                worst_rel = worst_rel.max(rel);
                checked += 1;
            }
        }
    }
    println!(
        "criterion 04 gradient-fidelity: PASS (50 nets, {checked} parameters, worst rel err {worst_rel:.2e}, {:.1}s)",
        started.elapsed().as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: zero-weighted (pruned) examples are inert.
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_pruning_inertness() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let input_dim = rng.gen_range(2..=5);
        let classes = rng.gen_range(2..=6);
        let params = {
            let mut p = NetParams::seeded(&[input_dim, 12, classes], rng.gen()).unwrap();
            for layer in p.layers_mut() {
                for w in layer.weights.iter_mut() {
                    *w += rng.gen_range(-0.5..0.5);
                }
            }
            p
        };
        let batch_n = rng.gen_range(3..=8);
        let batch: Vec<(Vec<f64>, usize)> = (0..batch_n)
            .map(|_| {
                (
                    (0..input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    rng.gen_range(0..classes),
                )
            })
            .collect();
        // Random set sizes with some randomly emptied (weight zero).
        let weights: Vec<f64> = (0..batch_n)
            .map(|_| {
                if rng.gen_bool(0.4) {
                    0.0
                } else {
                    rng.gen_range(1..=classes) as f64
                }
            })
            .collect();
        let normalizer = batch_n as f64;

        let refs: Vec<(&[f64], usize)> = batch.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
        let full = weighted_batch_backward(
            &params,
            &refs,
            &weights,
            normalizer,
            LossKind::CrossEntropy,
        )
        .unwrap();

        let survivors: Vec<usize> = (0..batch_n).filter(|&i| weights[i] > 0.0).collect();
        if survivors.is_empty() {
            assert_eq!(full.grads.max_abs(), 0.0);
            continue;
        }
        let sub_refs: Vec<(&[f64], usize)> = survivors.iter().map(|&i| refs[i]).collect();
        let sub_weights: Vec<f64> = survivors.iter().map(|&i| weights[i]).collect();
        let sub = weighted_batch_backward(
            &params,
            &sub_refs,
            &sub_weights,
            normalizer,
            LossKind::CrossEntropy,
        )
        .unwrap();

        for (a, b) in full
            .grads
            .d_weights
            .iter()
            .chain(full.grads.d_biases.iter())
            .flatten()
            .zip(sub.grads.d_weights.iter().chain(sub.grads.d_biases.iter()).flatten())
        {
            let diff = (a - b).abs();
            assert!(
                diff <= 1e-9,
                "criterion 05: FAIL: gradient differs by {diff:.2e} after removing pruned examples"
            );
            worst = worst.max(diff);
        }
    }
    println!(
        "criterion 05 pruning-inertness: PASS (200 random batches, max gradient deviation {worst:.2e}, {:.1}s)",
        started.elapsed().as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// Criteria 6-10 share the synthetic classification lab.
// ---------------------------------------------------------------------------

fn lab_spec(seed: u64, noise: f64) -> DatasetSpec {
    DatasetSpec {
        classes: 10,
        per_class_n: 800,
        minority_classes: BTreeSet::from([0, 5]),
        minority_fraction: 0.2,
        noise_rate: noise,
        seed,
        generator: GeneratorKind::GaussianBlobs {
            radius: 3.0,
            spread: 0.9,
            noise_dims: 0,
        },
        val_fraction: 0.2,
        calib_fraction: 0.2,
        test_per_class: 500,
    }
}

fn lab_config(seed: u64, alpha: f64) -> TrainConfig {
    TrainConfig {
        alpha,
        lr: 1e-3,
        max_epochs: 50,
        seed,
        batch_size: 64,
        ..TrainConfig::default()
    }
}

#[test]
fn criterion_06_algorithm_reduction() {
    let started = Instant::now();
    let data = TrainerDataset::from_split(&generate(&lab_spec(600, 0.0)).unwrap()).unwrap();
    let mut config = lab_config(6, 0.1);
    config.max_epochs = 2;

    // Absent calibrator: the method's epoch equals the baseline epoch.
    let mut method_state = TrainerState::new(&config, &data, true).unwrap();
    let mut baseline_state = TrainerState::new(&config, &data, false).unwrap();
    method_state.epoch = 1;
    baseline_state.epoch = 1;
    assert!(method_state.calibrator.is_none());
    train_epoch(&mut method_state, &data, &config, &mut Vec::new()).unwrap();
    train_epoch(&mut baseline_state, &data, &config, &mut Vec::new()).unwrap();
    assert_eq!(
        method_state.params, baseline_state.params,
        "criterion 06: FAIL: absent-calibrator epoch deviates from baseline bit-for-bit"
    );

    // All-singleton sets in normalized mode: warm the model on an easy,
    // well-separated dataset, then gate with a LAC threshold below 0.5 so
    // every set has exactly one member.
    let easy = DatasetSpec {
        minority_classes: BTreeSet::new(),
        generator: GeneratorKind::GaussianBlobs {
            radius: 6.0,
            spread: 0.25,
            noise_dims: 0,
        },
        per_class_n: 100,
        test_per_class: 10,
        ..lab_spec(601, 0.0)
    };
    let easy_data = TrainerDataset::from_split(&generate(&easy).unwrap()).unwrap();
    let mut warm_config = lab_config(7, 0.1);
    warm_config.max_epochs = 6;
    warm_config.lr = 1e-2;
    let warm = run_baseline(&warm_config, &easy_data).unwrap();
    let warm_params = warm.completed().unwrap().final_params.clone();

    let mut singleton_state = TrainerState::new(&warm_config, &easy_data, true).unwrap();
    singleton_state.params = warm_params.clone();
    singleton_state.calibrator = Some(CalibratedQuantile {
        q_hat: QuantileValue::Finite(0.49),
        alpha: 0.1,
        n: easy_data.calibration().len(),
        method: NonconformityMethod::Lac,
    });
    singleton_state.epoch = 9;
    let mut plain_state = TrainerState::new(&warm_config, &easy_data, false).unwrap();
    plain_state.params = warm_params;
    plain_state.epoch = 9;

    let mut singleton_steps = Vec::new();
    let _stats = train_epoch(&mut singleton_state, &easy_data, &warm_config, &mut singleton_steps).unwrap();
    train_epoch(&mut plain_state, &easy_data, &warm_config, &mut Vec::new()).unwrap();
    for step in &singleton_steps {
        assert_eq!(step.mean_raw_weight, 1.0, "criterion 06: singleton precondition violated");
        assert_eq!(step.pruned_fraction, 0.0);
    }
    assert_eq!(
        singleton_state.params, plain_state.params,
        "criterion 06: FAIL: all-singleton epoch deviates from baseline bit-for-bit"
    );
    println!(
        "criterion 06 algorithm-reduction: PASS (absent calibrator and all-singleton epochs bit-identical to baseline, {:.1}s)",
        started.elapsed().as_secs_f64()
    );
}

struct HeadlineCell {
    noise: f64,
    alpha: Option<f64>,
    macro_acc: f64,
    minority_recall: f64,
    per_class: Vec<f64>,
}

#[test]
fn criterion_07_desk_scale_headline() {
    let started = Instant::now();
    let noises = [0.1, 0.2, 0.3];
    let alphas: Vec<f64> = (0..10).map(|i| 0.10 + 0.01 * i as f64).collect();
    let seeds: Vec<u64> = (0..5).collect();

    let mut jobs: Vec<(f64, u64, Option<f64>)> = Vec::new();
    for &noise in &noises {
        for &seed in &seeds {
            jobs.push((noise, seed, None));
            for &alpha in &alphas {
                jobs.push((noise, seed, Some(alpha)));
            }
        }
    }
    let next = Mutex::new(0usize);
    let cells: Mutex<Vec<HeadlineCell>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..2 {
            scope.spawn(|| loop {
                let (noise, seed, alpha) = {
                    let mut guard = next.lock().unwrap();
                    if *guard >= jobs.len() {
                        return;
                    }
                    let job = jobs[*guard];
                    *guard += 1;
                    job
                };
                let ds = generate(&lab_spec(1000 + seed, noise)).unwrap();
                let data = TrainerDataset::from_split(&ds).unwrap();
                let config = lab_config(seed, alpha.unwrap_or(0.1));
                let report = if alpha.is_some() {
                    run_training(&config, &data).unwrap()
                } else {
                    run_baseline(&config, &data).unwrap()
                };
                let eval =
                    evaluate(&report.completed().unwrap().best_params, &ds.test, false).unwrap();
                let per_class: Vec<f64> =
                    eval.per_class_recall.iter().map(|r| r.unwrap()).collect();
                cells.lock().unwrap().push(HeadlineCell {
                    noise,
                    alpha,
                    macro_acc: eval.macro_accuracy,
                    minority_recall: (per_class[0] + per_class[5]) / 2.0,
                    per_class,
                });
            });
        }
    });
    let cells = cells.into_inner().unwrap();

    let mut summary = Vec::new();
    for &noise in &noises {
        let baseline: Vec<&HeadlineCell> = cells
            .iter()
            .filter(|c| c.noise == noise && c.alpha.is_none())
            .collect();
        let base_macro = median(baseline.iter().map(|c| c.macro_acc).collect());
        let base_minority = median(baseline.iter().map(|c| c.minority_recall).collect());
        let worst_class = (0..10)
            .min_by(|&a, &b| {
                let ra = median(baseline.iter().map(|c| c.per_class[a]).collect());
                let rb = median(baseline.iter().map(|c| c.per_class[b]).collect());
                ra.partial_cmp(&rb).unwrap()
            })
            .unwrap();
        let base_worst = median(baseline.iter().map(|c| c.per_class[worst_class]).collect());

        let mut best: Option<(f64, f64, f64, f64)> = None;
        for &alpha in &alphas {
            let runs: Vec<&HeadlineCell> = cells
                .iter()
                .filter(|c| c.noise == noise && c.alpha == Some(alpha))
                .collect();
            let mac = median(runs.iter().map(|c| c.macro_acc).collect());
            let minority = median(runs.iter().map(|c| c.minority_recall).collect());
            let worst = median(runs.iter().map(|c| c.per_class[worst_class]).collect());
            if best.is_none() || mac > best.unwrap().1 {
                best = Some((alpha, mac, minority, worst));
            }
        }
        let (best_alpha, best_macro, best_minority, best_worst) = best.unwrap();

        assert!(
            best_macro > base_macro,
            "criterion 07: FAIL at noise {noise}: best-alpha macro {best_macro:.4} does not exceed baseline {base_macro:.4}"
        );
        assert!(
            best_minority > base_minority,
            "criterion 07: FAIL at noise {noise}: minority recall {best_minority:.3} at best alpha {best_alpha} does not improve on {base_minority:.3}"
        );
        assert!(
            best_worst > base_worst,
            "criterion 07: FAIL at noise {noise}: worst class {worst_class} recall {best_worst:.3} does not improve on {base_worst:.3}"
        );
        summary.push(format!(
            "noise {noise}: alpha*={best_alpha:.2} macro {base_macro:.4}->{best_macro:.4} minority {base_minority:.3}->{best_minority:.3} worst(c{worst_class}) {base_worst:.3}->{best_worst:.3}"
        ));
    }
    println!(
        "criterion 07 desk-scale-headline: PASS ({}; {:.0}s)",
        summary.join(" | "),
        started.elapsed().as_secs_f64()
    );
}

#[test]
fn criterion_08_dynamics_properties() {
    let started = Instant::now();
    let mut first_uncertainty = Vec::new();
    let mut final_uncertainty = Vec::new();
    let mut early_max_range = Vec::new();
    let mut final_range = Vec::new();
    for seed in 0..5u64 {
        let data = TrainerDataset::from_split(&generate(&lab_spec(800 + seed, 0.0)).unwrap())
            .unwrap();
        let config = lab_config(seed, 0.15);
        let report = run_training(&config, &data).unwrap();
        report.completed().expect("run completes");

        // Exact: the threshold never moves between two calibrations.
        for epoch_record in &report.epochs {
            for step in report
                .steps
                .iter()
                .filter(|s| s.epoch == epoch_record.epoch)
            {
                assert_eq!(
                    step.q_hat, epoch_record.q_hat,
                    "criterion 08: FAIL: threshold changed between calibrations"
                );
            }
        }

        let epochs = &report.epochs;
        first_uncertainty.push(epochs.first().unwrap().uncertainty_fraction.unwrap());
        final_uncertainty.push(epochs.last().unwrap().uncertainty_fraction.unwrap());
        let half = (epochs.len() / 2).max(1);
        early_max_range.push(
            epochs[..half]
                .iter()
                .map(|e| e.weight_range)
                .fold(f64::NEG_INFINITY, f64::max),
        );
        final_range.push(epochs.last().unwrap().weight_range);
    }
    let first_med = median(first_uncertainty);
    let final_med = median(final_uncertainty);
    let early_med = median(early_max_range);
    let final_range_med = median(final_range);
    assert!(
        final_med < first_med,
        "criterion 08: FAIL: final uncertainty {final_med:.3} not below first-calibrated epoch {first_med:.3}"
    );
    assert!(
        final_range_med < early_med,
        "criterion 08: FAIL: final weight range {final_range_med:.3} did not decrease from early max {early_med:.3}"
    );
    println!(
        "criterion 08 dynamics-properties: PASS (uncertainty {first_med:.3}->{final_med:.3}, weight range max {early_med:.3}->{final_range_med:.3}, q-hat piecewise constant, {:.0}s)",
        started.elapsed().as_secs_f64()
    );
}

#[test]
fn criterion_09_pruning_vs_alpha() {
    let started = Instant::now();
    // Wider circle than the headline lab: overlap is pairwise only, so no
    // example stays ambiguous across many classes and the conservative end
    // of the grid performs no pruning at all.
    let spec = DatasetSpec {
        generator: GeneratorKind::GaussianBlobs {
            radius: 4.0,
            spread: 0.85,
            noise_dims: 0,
        },
        ..lab_spec(1000, 0.0)
    };
    let data = TrainerDataset::from_split(&generate(&spec).unwrap()).unwrap();
    let alphas: Vec<f64> = (0..10).map(|i| 0.10 + 0.01 * i as f64).collect();
    let mut cumulative_by_alpha: Vec<Vec<f64>> = Vec::new();
    for &alpha in &alphas {
        let config = TrainConfig {
            alpha,
            lr: 2e-3,
            max_epochs: 25,
            seed: 7,
            batch_size: 64,
            // Fixed epoch budget so every run reaches the same epochs.
            early_stop_patience: 10_000,
            lr_plateau: LrPlateau {
                patience: 10_000,
                ..LrPlateau::default()
            },
            ..TrainConfig::default()
        };
        let report = run_training(&config, &data).unwrap();
        assert_eq!(report.epochs.len(), 25);
        let mut cumulative = Vec::new();
        let mut pruned = 0.0;
        let mut total = 0.0;
        for epoch_record in &report.epochs {
            pruned += epoch_record.pruned_fraction * epoch_record.train_examples as f64;
            total += epoch_record.train_examples as f64;
            cumulative.push(pruned / total);
        }
        cumulative_by_alpha.push(cumulative);
    }

    #[allow(clippy::needless_range_loop)]
    for epoch in 0..25usize {
        for i in 1..alphas.len() {
            assert!(
                cumulative_by_alpha[i][epoch] >= cumulative_by_alpha[i - 1][epoch] - 1e-12,
                "criterion 09: FAIL: pruned fraction decreased from alpha {} to {} at epoch {}: {} -> {}",
                alphas[i - 1],
                alphas[i],
                epoch + 1,
                cumulative_by_alpha[i - 1][epoch],
                cumulative_by_alpha[i][epoch]
            );
        }
    }
    let lowest_total = *cumulative_by_alpha[0].last().unwrap();
    let highest_total = *cumulative_by_alpha[9].last().unwrap();
    assert_eq!(
        lowest_total, 0.0,
        "criterion 09: FAIL: alpha=0.10 pruned fraction {lowest_total} is not zero"
    );
    println!(
        "criterion 09 pruning-vs-alpha: PASS (monotone at all 25 matched epochs; total pruned 0.0000 at alpha .10 up to {highest_total:.4} at .19, {:.0}s)",
        started.elapsed().as_secs_f64()
    );
}

#[test]
fn criterion_10_overhead() {
    let started = Instant::now();
    let data = TrainerDataset::from_split(&generate(&lab_spec(900, 0.1)).unwrap()).unwrap();
    let mut config = lab_config(3, 0.15);
    config.max_epochs = 8;
    config.batch_size = 64;

    let method = run_training(&config, &data).unwrap();
    let baseline = run_baseline(&config, &data).unwrap();

    // Skip the first epoch of each run as warmup, then compare mean step
    // times.
    let mean_after_warmup = |report: &citl_core::trainer::RunReport| {
        let steps: Vec<f64> = report
            .steps
            .iter()
            .filter(|s| s.epoch > 1)
            .map(|s| s.wall_ns as f64)
            .collect();
        steps.iter().sum::<f64>() / steps.len() as f64
    };
    let method_ns = mean_after_warmup(&method);
    let baseline_ns = mean_after_warmup(&baseline);
    let ratio = method_ns / baseline_ns;
    assert!(
        ratio <= 1.25,
        "criterion 10: FAIL: method step time {method_ns:.0}ns is {ratio:.3}x baseline {baseline_ns:.0}ns (limit 1.25x)"
    );
    println!(
        "criterion 10 overhead: PASS (method {:.3}ms vs baseline {:.3}ms per step, ratio {ratio:.3} <= 1.25, {:.0}s)",
        method_ns / 1e6,
        baseline_ns / 1e6,
        started.elapsed().as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// Criterion 11: metric oracles.
// ---------------------------------------------------------------------------

#[test]
fn criterion_11_metric_oracles() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let mut miou_checked = 0usize;
    for case in 0..1000 {
        let classes = rng.gen_range(2..=10);
        let n = rng.gen_range(1..=200);
        let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let counts = ConfusionCounts::from_predictions(&preds, &labels, classes).unwrap();

        // Brute-force macro accuracy: per class, count raw agreement of the
        // one-vs-rest indicator vectors.
        let mut acc_sum = 0.0;
        for class in 0..classes {
            let agree = preds
                .iter()
                .zip(&labels)
                .filter(|&(&p, &l)| (p == class) == (l == class))
                .count();
            acc_sum += agree as f64 / n as f64;
        }
        let oracle_macro = acc_sum / classes as f64;
        let got_macro = macro_accuracy(&counts).unwrap();
        assert_eq!(
            got_macro, oracle_macro,
            "criterion 11: FAIL case {case}: macro accuracy {got_macro} != oracle {oracle_macro}"
        );

        // Brute-force mIoU: per class, |intersection| / |union| of predicted
        // and true index sets, skipping classes with empty unions.
        let mut iou_sum = 0.0;
        let mut used = 0usize;
        for class in 0..classes {
            let inter = preds
                .iter()
                .zip(&labels)
                .filter(|&(&p, &l)| p == class && l == class)
                .count();
            let union = preds
                .iter()
                .zip(&labels)
                .filter(|&(&p, &l)| p == class || l == class)
                .count();
            if union > 0 {
                iou_sum += inter as f64 / union as f64;
                used += 1;
            }
        }
        if used > 0 {
            let oracle_miou = iou_sum / used as f64;
            let got_miou = miou(&counts).unwrap().miou;
            assert_eq!(
                got_miou, oracle_miou,
                "criterion 11: FAIL case {case}: mIoU {got_miou} != oracle {oracle_miou}"
            );
            miou_checked += 1;
        }
    }
    println!(
        "criterion 11 metric-oracles: PASS (1000 macro-accuracy cases, {miou_checked} mIoU cases, exact equality, {:.1}s)",
        started.elapsed().as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// Shared sanity check: the focal loss examples used across criteria.
// ---------------------------------------------------------------------------

#[test]
fn focal_loss_hand_values() {
    let p = ProbabilityVector::new(vec![0.5, 0.5]).unwrap();
    assert!((focal_loss(&p, 0, 0.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((focal_loss(&p, 0, 2.0).unwrap() - 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
    let perfect = ProbabilityVector::new(vec![1.0, 0.0]).unwrap();
    assert_eq!(focal_loss(&perfect, 0, 2.0).unwrap(), 0.0);

    // ADAM first-step magnitude: |update| ~ lr for a fresh state.
    let mut params = NetParams::zeros(&[1, 2]).unwrap();
    let mut grads = net::NetGrads::zeros_like(&params);
    grads.d_weights[0][0] = 0.3;
    let mut state = AdamState::new(&params);
    optimizer_step(&mut params, &grads, &mut state, &AdamConfig::default(), 1e-3).unwrap();
    assert!((params.layers()[0].weights[0] + 1e-3).abs() < 1e-9);
}
