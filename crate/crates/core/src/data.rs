//! Seeded synthetic datasets with controlled class imbalance and symmetric
//! label noise, plus a dense-prediction toy task where one item supplies a
//! whole grid of per-cell examples.
//!
//! Generation is deterministic given the spec seed: every stage (per-class
//! sampling, shuffling, noise) draws from its own ChaCha8 stream derived from
//! the seed, so datasets are byte-identical across runs and platforms.
//!
//! Pipeline for classification generators:
//! 1. sample `per_class_n` examples per class (minority classes downsampled
//!    to `minority_fraction` before any splitting),
//! 2. shuffle and split off the validation pool, carve the calibration
//!    prefix from it,
//! 3. flip training labels only, each with probability `noise_rate`,
//!    uniformly to one of the other classes,
//! 4. sample the test split separately at full per-class frequency.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// RNG family declaration written into dataset file headers.
pub const RNG_DECLARATION: &str = "ChaCha8 (rand_chacha 0.3)";

/// One labeled feature vector. `y_clean`, `is_noisy` and `is_minority` are
/// diagnostics for analysis only; the training loss path must never read
/// them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub x: Vec<f64>,
    pub y: usize,
    pub y_clean: usize,
    pub is_noisy: bool,
    pub is_minority: bool,
}

impl LabeledExample {
    fn clean(x: Vec<f64>, y: usize, is_minority: bool) -> Self {
        Self {
            x,
            y,
            y_clean: y,
            is_noisy: false,
            is_minority,
        }
    }
}

/// Class-frequency skew for the dense-grid generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ClassSkew {
    Uniform,
    /// Class `c` drawn with probability proportional to `ratio^c`.
    Geometric { ratio: f64 },
}

/// Which synthetic process produces the features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GeneratorKind {
    /// Isotropic Gaussian clusters with means equally spaced on a circle.
    /// Adjacent classes overlap, so some examples are intrinsically
    /// ambiguous. `noise_dims` appends label-free coordinates; they give a
    /// high-capacity model room to memorize individual (possibly mislabeled)
    /// examples, like real image features do.
    GaussianBlobs {
        #[serde(default = "default_blob_radius")]
        radius: f64,
        #[serde(default = "default_blob_spread")]
        spread: f64,
        #[serde(default)]
        noise_dims: usize,
    },
    /// Class `c` lives on the ring of radius `(c+1)/(C+1)` with Gaussian
    /// radial noise. Nonlinearly separable. `noise_dims` as for blobs.
    ConcentricRings {
        #[serde(default = "default_ring_noise")]
        radial_noise: f64,
        #[serde(default)]
        noise_dims: usize,
    },
    /// Items are `height x width` grids of cells labeled by a seeded
    /// Voronoi pattern; each cell is one example.
    DenseGrid {
        height: usize,
        width: usize,
        /// Items in the train+validation pool.
        items: usize,
        #[serde(default = "default_test_items")]
        test_items: usize,
        #[serde(default = "default_regions")]
        regions_per_item: usize,
        skew: ClassSkew,
        #[serde(default = "default_channel_noise")]
        channel_noise: f64,
    },
}

fn default_blob_radius() -> f64 {
    3.0
}
fn default_blob_spread() -> f64 {
    1.0
}
fn default_ring_noise() -> f64 {
    0.04
}
fn default_regions() -> usize {
    8
}
fn default_channel_noise() -> f64 {
    0.15
}
fn default_test_items() -> usize {
    8
}
fn default_val_fraction() -> f64 {
    0.2
}
fn default_calib_fraction() -> f64 {
    0.2
}
fn default_test_per_class() -> usize {
    200
}

/// Full recipe for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub classes: usize,
    pub per_class_n: usize,
    #[serde(default)]
    pub minority_classes: BTreeSet<usize>,
    #[serde(default = "default_one")]
    pub minority_fraction: f64,
    #[serde(default)]
    pub noise_rate: f64,
    pub seed: u64,
    pub generator: GeneratorKind,
    /// Share of the pre-split pool that becomes the validation pool.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Share of the validation pool carved off as the calibration prefix
    /// (classification mode).
    #[serde(default = "default_calib_fraction")]
    pub calib_fraction: f64,
    /// Test examples per class, sampled at full frequency.
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
}

fn default_one() -> f64 {
    1.0
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        if !(0.0..=0.5).contains(&self.noise_rate) {
            return Err(Error::config(format!(
                "noise_rate {} outside [0, 0.5]; labels stop carrying signal past 0.5",
                self.noise_rate
            )));
        }
        if !(self.minority_fraction > 0.0 && self.minority_fraction <= 1.0) {
            return Err(Error::config(format!(
                "minority_fraction {} outside (0, 1]",
                self.minority_fraction
            )));
        }
        if let Some(&bad) = self.minority_classes.iter().find(|&&c| c >= self.classes) {
            return Err(Error::config(format!(
                "minority class {bad} out of range for {} classes",
                self.classes
            )));
        }
        match &self.generator {
            GeneratorKind::DenseGrid {
                height,
                width,
                items,
                regions_per_item,
                skew,
                ..
            } => {
                if *height < 8 || *width < 8 {
                    return Err(Error::config(format!(
                        "dense grid must be at least 8x8, got {height}x{width}"
                    )));
                }
                if self.classes < 3 {
                    return Err(Error::config(
                        "dense grid mode needs at least 3 classes",
                    ));
                }
                if *items == 0 || *regions_per_item == 0 {
                    return Err(Error::config("dense grid needs items and regions"));
                }
                if let ClassSkew::Geometric { ratio } = skew {
                    if !(*ratio > 0.0 && ratio.is_finite()) {
                        return Err(Error::config(format!("bad skew ratio {ratio}")));
                    }
                }
            }
            GeneratorKind::GaussianBlobs { radius, spread, .. } => {
                if *radius <= 0.0 || *spread <= 0.0 {
                    return Err(Error::config("blob radius and spread must be positive"));
                }
                self.validate_classification()?;
            }
            GeneratorKind::ConcentricRings { radial_noise, .. } => {
                if *radial_noise <= 0.0 {
                    return Err(Error::config("ring radial_noise must be positive"));
                }
                self.validate_classification()?;
            }
        }
        Ok(())
    }

    fn validate_classification(&self) -> Result<()> {
        if self.per_class_n == 0 {
            return Err(Error::config("per_class_n must be positive"));
        }
        if self.minority_count() < 1 {
            return Err(Error::config(format!(
                "minority_fraction {} of per_class_n {} leaves no examples",
                self.minority_fraction, self.per_class_n
            )));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config(format!(
                "val_fraction {} outside (0, 1)",
                self.val_fraction
            )));
        }
        if !(self.calib_fraction > 0.0 && self.calib_fraction < 1.0) {
            return Err(Error::config(format!(
                "calib_fraction {} outside (0, 1)",
                self.calib_fraction
            )));
        }
        Ok(())
    }

    /// Pre-split examples contributed by each minority class.
    pub fn minority_count(&self) -> usize {
        (self.per_class_n as f64 * self.minority_fraction).round() as usize
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.generator, GeneratorKind::DenseGrid { .. })
    }
}

/// The four classification splits. Calibration and validation are disjoint;
/// noise only ever touches `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub train: Vec<LabeledExample>,
    pub validation: Vec<LabeledExample>,
    pub calibration: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub spec: DatasetSpec,
}

impl SplitDataset {
    pub fn feature_dim(&self) -> usize {
        self.train.first().map(|e| e.x.len()).unwrap_or(0)
    }
}

/// One dense item: a `height x width` grid of per-cell examples, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseItem {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<LabeledExample>,
}

/// Dense-mode splits: whole items for train/validation/test, and the
/// cell-level calibration subsample. Calibration cells come from items
/// removed from the validation pool, so the splits stay disjoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseDataset {
    pub train: Vec<DenseItem>,
    pub validation: Vec<DenseItem>,
    pub calibration: Vec<LabeledExample>,
    pub test: Vec<DenseItem>,
    pub spec: DatasetSpec,
}

// Distinct stream tags per generation stage.
const STREAM_CLASS_BASE: u64 = 0x10;
const STREAM_SPLIT: u64 = 0x01;
const STREAM_NOISE: u64 = 0x02;
const STREAM_TEST_BASE: u64 = 0x2000;
const STREAM_DENSE_BASE: u64 = 0x4000;
const STREAM_CALIB_SAMPLE: u64 = 0x03;

/// Derive a child seed for an independent RNG stream.
fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer over seed + tag * golden ratio.
    let mut z = seed.wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

/// Standard normal via Box-Muller; hand-rolled so the byte stream is pinned
/// by this crate alone.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generate the four classification splits. Dense specs use
/// [`generate_dense`] instead.
pub fn generate(spec: &DatasetSpec) -> Result<SplitDataset> {
    spec.validate()?;
    if spec.is_dense() {
        return Err(Error::config(
            "dense specs produce items, not flat splits; use generate_dense",
        ));
    }

    // Per-class pools, minority classes downsampled before any split.
    let mut pool = Vec::new();
    for class in 0..spec.classes {
        let is_minority = spec.minority_classes.contains(&class);
        let count = if is_minority {
            spec.minority_count()
        } else {
            spec.per_class_n
        };
        let mut rng = stream(spec.seed, STREAM_CLASS_BASE + class as u64);
        for _ in 0..count {
            pool.push(LabeledExample::clean(
                sample_features(&spec.generator, spec.classes, class, &mut rng),
                class,
                is_minority,
            ));
        }
    }

    let mut rng = stream(spec.seed, STREAM_SPLIT);
    pool.shuffle(&mut rng);
    let val_total = ((pool.len() as f64) * spec.val_fraction).round() as usize;
    let val_total = val_total.clamp(2, pool.len() - 1);
    let mut validation_pool = pool.split_off(pool.len() - val_total);
    let mut train = pool;

    // Calibration is the prefix of the validation pool.
    let calib_n = ((val_total as f64) * spec.calib_fraction).ceil() as usize;
    let calib_n = calib_n.clamp(1, val_total - 1);
    let validation = validation_pool.split_off(calib_n);
    let calibration = validation_pool;

    inject_noise(&mut train, spec.noise_rate, spec.classes, derive_seed(spec.seed, STREAM_NOISE))?;

    // Test split: full class frequency, untouched by downsampling or noise.
    let mut test = Vec::with_capacity(spec.classes * spec.test_per_class);
    for class in 0..spec.classes {
        let mut rng = stream(spec.seed, STREAM_TEST_BASE + class as u64);
        for _ in 0..spec.test_per_class {
            test.push(LabeledExample::clean(
                sample_features(&spec.generator, spec.classes, class, &mut rng),
                class,
                false,
            ));
        }
    }
    let mut rng = stream(spec.seed, STREAM_TEST_BASE);
    test.shuffle(&mut rng);

    Ok(SplitDataset {
        train,
        validation,
        calibration,
        test,
        spec: spec.clone(),
    })
}

fn sample_features(
    generator: &GeneratorKind,
    classes: usize,
    class: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    match generator {
        GeneratorKind::GaussianBlobs {
            radius,
            spread,
            noise_dims,
        } => {
            let angle = std::f64::consts::TAU * class as f64 / classes as f64;
            let mut x = vec![
                radius * angle.cos() + spread * normal(rng),
                radius * angle.sin() + spread * normal(rng),
            ];
            x.extend((0..*noise_dims).map(|_| spread * normal(rng)));
            x
        }
        GeneratorKind::ConcentricRings {
            radial_noise,
            noise_dims,
        } => {
            let base = (class as f64 + 1.0) / (classes as f64 + 1.0);
            let r = base + radial_noise * normal(rng);
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let mut x = vec![r * theta.cos(), r * theta.sin()];
            x.extend((0..*noise_dims).map(|_| radial_noise * normal(rng)));
            x
        }
        GeneratorKind::DenseGrid { .. } => unreachable!("dense items use dense_grid"),
    }
}

/// Flip each label with probability `rate`, uniformly to one of the other
/// `num_classes - 1` classes. `y_clean` is preserved; `is_noisy` tracks the
/// flip.
pub fn inject_noise(
    examples: &mut [LabeledExample],
    rate: f64,
    num_classes: usize,
    seed: u64,
) -> Result<()> {
    if !(0.0..=0.5).contains(&rate) {
        return Err(Error::domain(format!(
            "noise rate {rate} outside [0, 0.5]; past 0.5 the labels no longer identify the class"
        )));
    }
    if num_classes < 2 {
        return Err(Error::domain("noise needs at least 2 classes"));
    }
    if rate == 0.0 {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for example in examples.iter_mut() {
        if rng.gen::<f64>() < rate {
            let offset = rng.gen_range(1..num_classes);
            example.y = (example.y_clean + offset) % num_classes;
            example.is_noisy = example.y != example.y_clean;
        } else {
            example.y = example.y_clean;
            example.is_noisy = false;
        }
    }
    Ok(())
}

/// Generate the raw dense items (before splitting).
///
/// Each item is a Voronoi partition of the grid: `regions_per_item` seeded
/// centers get classes drawn from the skew distribution, every cell takes
/// the class of its nearest center. Cell features are the normalized
/// coordinates plus two noisy class-dependent channel values.
pub fn dense_grid(spec: &DatasetSpec) -> Result<Vec<DenseItem>> {
    spec.validate()?;
    let GeneratorKind::DenseGrid {
        height,
        width,
        items,
        test_items,
        ..
    } = &spec.generator
    else {
        return Err(Error::config("dense_grid needs a dense generator"));
    };
    (0..items + test_items)
        .map(|i| dense_item(spec, *height, *width, stream(spec.seed, STREAM_DENSE_BASE + i as u64)))
        .collect()
}

fn dense_item(
    spec: &DatasetSpec,
    height: usize,
    width: usize,
    mut rng: ChaCha8Rng,
) -> Result<DenseItem> {
    let GeneratorKind::DenseGrid {
        regions_per_item,
        skew,
        channel_noise,
        ..
    } = &spec.generator
    else {
        unreachable!("checked by caller");
    };

    let class_weights: Vec<f64> = match skew {
        ClassSkew::Uniform => vec![1.0; spec.classes],
        ClassSkew::Geometric { ratio } => {
            (0..spec.classes).map(|c| ratio.powi(c as i32)).collect()
        }
    };
    let weight_total: f64 = class_weights.iter().sum();

    let centers: Vec<(f64, f64, usize)> = (0..*regions_per_item)
        .map(|_| {
            let r = rng.gen_range(0.0..height as f64);
            let c = rng.gen_range(0.0..width as f64);
            let mut pick = rng.gen_range(0.0..weight_total);
            let mut class = spec.classes - 1;
            for (idx, &w) in class_weights.iter().enumerate() {
                if pick < w {
                    class = idx;
                    break;
                }
                pick -= w;
            }
            (r, c, class)
        })
        .collect();

    let mut cells = Vec::with_capacity(height * width);
    for row in 0..height {
        for col in 0..width {
            let (mut best, mut best_d) = (0usize, f64::INFINITY);
            for (i, &(cr, cc, _)) in centers.iter().enumerate() {
                let d = (cr - row as f64).powi(2) + (cc - col as f64).powi(2);
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            let class = centers[best].2;
            // Two channel values carry the class signal; coordinates alone
            // do not determine it.
            let signal = class as f64 / spec.classes as f64;
            let x = vec![
                row as f64 / height as f64,
                col as f64 / width as f64,
                signal + channel_noise * normal(&mut rng),
                (1.0 - signal) + channel_noise * normal(&mut rng),
            ];
            cells.push(LabeledExample::clean(x, class, false));
        }
    }
    Ok(DenseItem {
        height,
        width,
        cells,
    })
}

/// Split dense items into train/validation/test, inject per-cell noise into
/// train items, and build the calibration cell subsample: 10% of the
/// validation pool's items are split off for calibration, then 10% of each
/// of those items' cells are sampled for quantile fitting.
pub fn generate_dense(spec: &DatasetSpec) -> Result<DenseDataset> {
    let GeneratorKind::DenseGrid { items, .. } = &spec.generator else {
        return Err(Error::config("generate_dense needs a dense generator"));
    };
    if *items < 3 {
        return Err(Error::config(
            "dense mode needs at least 3 items to split train/validation/calibration",
        ));
    }
    let mut all = dense_grid(spec)?;
    let test = all.split_off(*items);
    let mut pool = all;

    let mut rng = stream(spec.seed, STREAM_SPLIT);
    pool.shuffle(&mut rng);
    let val_pool_n = ((pool.len() as f64) * spec.val_fraction).round() as usize;
    let val_pool_n = val_pool_n.clamp(2, pool.len() - 1);
    let mut val_pool = pool.split_off(pool.len() - val_pool_n);
    let mut train = pool;

    let noise_seed = derive_seed(spec.seed, STREAM_NOISE);
    for (i, item) in train.iter_mut().enumerate() {
        inject_noise(
            &mut item.cells,
            spec.noise_rate,
            spec.classes,
            derive_seed(noise_seed, i as u64),
        )?;
    }

    // Calibration items are removed from the validation pool, then 10% of
    // each one's cells are sampled for fitting.
    let calib_items_n = ((val_pool_n as f64) * 0.1).ceil() as usize;
    let calib_items_n = calib_items_n.clamp(1, val_pool_n - 1);
    let validation = val_pool.split_off(calib_items_n);
    let calib_items = val_pool;

    let mut rng = stream(spec.seed, STREAM_CALIB_SAMPLE);
    let mut calibration = Vec::new();
    for item in &calib_items {
        let take = (((item.cells.len() as f64) * 0.1).ceil() as usize).max(1);
        let mut cell_order: Vec<usize> = (0..item.cells.len()).collect();
        cell_order.shuffle(&mut rng);
        for &cell in cell_order.iter().take(take) {
            calibration.push(item.cells[cell].clone());
        }
    }

    Ok(DenseDataset {
        train,
        validation,
        calibration,
        test,
        spec: spec.clone(),
    })
}

/// Header line written before the records of each exported split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub rng: String,
    pub split: String,
    pub count: usize,
    pub spec: DatasetSpec,
}

const DATASET_FORMAT: &str = "citl-dataset";
const DATASET_VERSION: u32 = 1;

/// Write one split as line-delimited records behind a header declaring the
/// spec, seed, and RNG family.
pub fn write_examples(
    out: &mut impl Write,
    split: &str,
    spec: &DatasetSpec,
    examples: &[LabeledExample],
) -> Result<()> {
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        rng: RNG_DECLARATION.into(),
        split: split.into(),
        count: examples.len(),
        spec: spec.clone(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header"))?;
    for example in examples {
        writeln!(out, "{}", serde_json::to_string(example).expect("record"))?;
    }
    Ok(())
}

/// Read a split written by [`write_examples`], checking format, version, and
/// record count.
pub fn read_examples(input: &mut impl BufRead) -> Result<(DatasetHeader, Vec<LabeledExample>)> {
    let mut first = String::new();
    if input.read_line(&mut first)? == 0 {
        return Err(Error::Format("empty dataset file".into()));
    }
    let header: DatasetHeader = serde_json::from_str(first.trim_end())
        .map_err(|e| Error::Format(format!("bad dataset header: {e}")))?;
    if header.format != DATASET_FORMAT {
        return Err(Error::Format(format!(
            "unexpected dataset format marker {:?}",
            header.format
        )));
    }
    if header.version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {} (supported: {DATASET_VERSION})",
            header.version
        )));
    }
    let mut examples = Vec::with_capacity(header.count);
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let example: LabeledExample = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("bad record at line {}: {e}", lineno + 2)))?;
        if example.is_noisy != (example.y != example.y_clean) {
            return Err(Error::Format(format!(
                "record at line {} violates the noise-flag invariant",
                lineno + 2
            )));
        }
        examples.push(example);
    }
    if examples.len() != header.count {
        return Err(Error::Format(format!(
            "header declares {} records, file has {}",
            header.count,
            examples.len()
        )));
    }
    Ok((header, examples))
}
