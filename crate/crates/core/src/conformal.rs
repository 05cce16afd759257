//! Split-conformal prediction: non-conformity scoring, quantile fitting, and
//! prediction-set construction.
//!
//! Everything here is model-free: the inputs are softmax vectors and labels.
//! Two score functions are supported:
//! - LAC: `1 - p[label]`. Smallest average sets, may produce empty sets.
//! - APS: cumulative probability of all classes ranked at or above the true
//!   class (descending order). Sets are never empty.
//!
//! The fitted threshold is the `ceil((n+1)(1-alpha))`-th smallest calibration
//! score. When that order statistic does not exist (`k > n`) the threshold is
//! the `Infinite` sentinel and every class is admitted; this is the
//! guarantee-preserving convention for tiny calibration sets.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Tolerance on the sum-to-one invariant of a probability vector.
pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

/// One softmax output over `C >= 2` classes.
///
/// Entries are validated to be in `[0, 1]` and to sum to 1 within
/// [`PROB_SUM_TOLERANCE`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::domain(format!(
                "probability vector needs at least 2 classes, got {}",
                probs.len()
            )));
        }
        let mut sum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || !(0.0..=1.0).contains(&p) {
                return Err(Error::domain(format!(
                    "probability at index {i} is {p}, expected a finite value in [0, 1]"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(Error::domain(format!(
                "probabilities sum to {sum}, expected 1 within {PROB_SUM_TOLERANCE}"
            )));
        }
        Ok(Self(probs))
    }

    /// Number of classes.
    #[inline]
    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Index of the highest-probability class (ties broken by lowest index).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate().skip(1) {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.0.len() {
            return Err(Error::domain(format!(
                "label {label} out of range for {} classes",
                self.0.len()
            )));
        }
        Ok(())
    }
}

impl std::ops::Index<usize> for ProbabilityVector {
    type Output = f64;
    fn index(&self, idx: usize) -> &f64 {
        &self.0[idx]
    }
}

/// Which non-conformity score gates set membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NonconformityMethod {
    Lac,
    Aps,
}

impl std::fmt::Display for NonconformityMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NonconformityMethod::Lac => write!(f, "lac"),
            NonconformityMethod::Aps => write!(f, "aps"),
        }
    }
}

/// A calibrated score threshold: finite (drawn from the calibration scores)
/// or the all-classes-admitted sentinel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuantileValue {
    Finite(f64),
    Infinite,
}

impl QuantileValue {
    /// Threshold as an `f64`; the sentinel maps to `f64::INFINITY` so that
    /// `score <= threshold` admits everything.
    #[inline]
    pub fn threshold(self) -> f64 {
        match self {
            QuantileValue::Finite(v) => v,
            QuantileValue::Infinite => f64::INFINITY,
        }
    }

    #[inline]
    pub fn is_infinite(self) -> bool {
        matches!(self, QuantileValue::Infinite)
    }
}

// JSON cannot carry IEEE infinities, so the sentinel serializes as the string
// "infinite" and finite values as plain numbers.
impl Serialize for QuantileValue {
    fn serialize<S: Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            QuantileValue::Finite(v) => ser.serialize_f64(*v),
            QuantileValue::Infinite => ser.serialize_str("infinite"),
        }
    }
}

impl<'de> Deserialize<'de> for QuantileValue {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(de)? {
            Raw::Num(v) => Ok(QuantileValue::Finite(v)),
            Raw::Text(s) if s == "infinite" => Ok(QuantileValue::Infinite),
            Raw::Text(s) => Err(D::Error::custom(format!("bad quantile value: {s:?}"))),
        }
    }
}

/// The fitted split-conformal threshold together with the settings it was
/// fit under. Immutable once constructed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedQuantile {
    pub q_hat: QuantileValue,
    pub alpha: f64,
    /// Calibration set size.
    pub n: usize,
    pub method: NonconformityMethod,
}

/// A subset of the class indices `[0, C)` for one example, kept sorted.
///
/// Cardinality zero is possible only under LAC.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionSet {
    members: Vec<usize>,
}

impl PredictionSet {
    pub fn from_sorted(members: Vec<usize>) -> Self {
        debug_assert!(members.windows(2).all(|w| w[0] < w[1]));
        Self { members }
    }

    #[inline]
    pub fn cardinality(&self) -> usize {
        self.members.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    #[inline]
    pub fn contains(&self, class: usize) -> bool {
        self.members.binary_search(&class).is_ok()
    }

    #[inline]
    pub fn members(&self) -> &[usize] {
        &self.members
    }

    /// Set size as the loss weight it becomes.
    #[inline]
    pub fn weight(&self) -> f64 {
        self.members.len() as f64
    }
}

/// LAC score: `1 - p[label]`.
pub fn lac_score(p: &ProbabilityVector, label: usize) -> Result<f64> {
    p.check_label(label)?;
    Ok(1.0 - p[label])
}

/// APS score: cumulative probability of all classes ranked at or above the
/// true class when sorted by descending probability (ties broken by class
/// index), the true class included.
pub fn aps_score(p: &ProbabilityVector, label: usize) -> Result<f64> {
    p.check_label(label)?;
    let order = descending_order(p);
    let mut cum = 0.0;
    for &class in &order {
        cum += p[class];
        if class == label {
            return Ok(cum);
        }
    }
    unreachable!("label validated against class count");
}

/// Score under the given method.
pub fn score(method: NonconformityMethod, p: &ProbabilityVector, label: usize) -> Result<f64> {
    match method {
        NonconformityMethod::Lac => lac_score(p, label),
        NonconformityMethod::Aps => aps_score(p, label),
    }
}

/// Fit the split-conformal threshold: the `ceil((n+1)(1-alpha))`-th smallest
/// calibration score, or `Infinite` when that rank exceeds `n`.
pub fn fit_quantile(
    scores: &[f64],
    alpha: f64,
    method: NonconformityMethod,
) -> Result<CalibratedQuantile> {
    if scores.is_empty() {
        return Err(Error::Calibration(
            "cannot fit a quantile on an empty calibration set".into(),
        ));
    }
    if !alpha.is_finite() || alpha <= 0.0 || alpha >= 1.0 {
        return Err(Error::domain(format!(
            "alpha is {alpha}, expected a value strictly inside (0, 1)"
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Calibration(format!(
            "calibration scores contain a non-finite value: {bad}"
        )));
    }

    let n = scores.len();
    let rank = conformal_rank(n, alpha);
    let q_hat = if rank > n {
        QuantileValue::Infinite
    } else {
        let mut sorted = scores.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
        QuantileValue::Finite(sorted[rank - 1])
    };
    Ok(CalibratedQuantile {
        q_hat,
        alpha,
        n,
        method,
    })
}

/// 1-based order statistic rank `ceil((n+1)(1-alpha))` used by
/// [`fit_quantile`]. Exposed so audits index the sorted scores identically.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    ((n as f64 + 1.0) * (1.0 - alpha)).ceil() as usize
}

/// LAC set: `{ y : 1 - p[y] <= q_hat }`. May be empty.
pub fn predict_set_lac(p: &ProbabilityVector, q: &CalibratedQuantile) -> Result<PredictionSet> {
    if q.method != NonconformityMethod::Lac {
        return Err(Error::domain(format!(
            "predict_set_lac called with a quantile fit for {}",
            q.method
        )));
    }
    let threshold = q.q_hat.threshold();
    let members = (0..p.num_classes())
        .filter(|&y| 1.0 - p[y] <= threshold)
        .collect();
    Ok(PredictionSet::from_sorted(members))
}

/// APS set: classes in descending probability order until the cumulative sum
/// reaches `q_hat`; the crossing class is included and the top class always
/// is, so the set is never empty.
pub fn predict_set_aps(p: &ProbabilityVector, q: &CalibratedQuantile) -> Result<PredictionSet> {
    if q.method != NonconformityMethod::Aps {
        return Err(Error::domain(format!(
            "predict_set_aps called with a quantile fit for {}",
            q.method
        )));
    }
    let threshold = q.q_hat.threshold();
    let order = descending_order(p);
    let mut members = Vec::new();
    let mut cum = 0.0;
    for &class in &order {
        if members.is_empty() || cum < threshold {
            members.push(class);
            cum += p[class];
        } else {
            break;
        }
    }
    members.sort_unstable();
    Ok(PredictionSet::from_sorted(members))
}

/// Set construction dispatching on the quantile's method.
pub fn predict_set(p: &ProbabilityVector, q: &CalibratedQuantile) -> Result<PredictionSet> {
    match q.method {
        NonconformityMethod::Lac => predict_set_lac(p, q),
        NonconformityMethod::Aps => predict_set_aps(p, q),
    }
}

/// Fraction of examples whose set contains the true label.
pub fn empirical_coverage(sets: &[PredictionSet], labels: &[usize]) -> Result<f64> {
    if sets.is_empty() || sets.len() != labels.len() {
        return Err(Error::domain(format!(
            "coverage needs equal-length non-empty inputs, got {} sets and {} labels",
            sets.len(),
            labels.len()
        )));
    }
    let hits = sets
        .iter()
        .zip(labels)
        .filter(|(set, &label)| set.contains(label))
        .count();
    Ok(hits as f64 / sets.len() as f64)
}

/// Class indices sorted by descending probability, ties broken by index.
fn descending_order(p: &ProbabilityVector) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p.num_classes()).collect();
    order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).expect("finite probs").then(a.cmp(&b)));
    order
}
