//! Evaluation metrics: macro accuracy (per-class one-vs-rest accuracy,
//! averaged), mean IoU over test-set-concatenated counts, and the
//! diagnostic rates fed into the analysis figures.

use serde::{Deserialize, Serialize};

use crate::conformal::PredictionSet;
use crate::error::{Error, Result};

/// Per-class one-vs-rest confusion counts aggregated over a prediction run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub tn: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub total: u64,
}

impl ConfusionCounts {
    /// Tally counts from predicted and true class indices.
    pub fn from_predictions(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<Self> {
        if preds.len() != labels.len() || preds.is_empty() {
            return Err(Error::domain(format!(
                "confusion counts need equal-length non-empty inputs, got {} preds and {} labels",
                preds.len(),
                labels.len()
            )));
        }
        let mut counts = Self {
            tp: vec![0; num_classes],
            tn: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
            total: 0,
        };
        for (&pred, &label) in preds.iter().zip(labels) {
            if pred >= num_classes || label >= num_classes {
                return Err(Error::domain(format!(
                    "class index out of range: pred={pred} label={label} C={num_classes}"
                )));
            }
            counts.add(pred, label);
        }
        Ok(counts)
    }

    pub fn empty(num_classes: usize) -> Self {
        Self {
            tp: vec![0; num_classes],
            tn: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
            total: 0,
        }
    }

    /// Record one (prediction, label) pair across every per-class tally.
    pub fn add(&mut self, pred: usize, label: usize) {
        for class in 0..self.num_classes() {
            match (pred == class, label == class) {
                (true, true) => self.tp[class] += 1,
                (true, false) => self.fp[class] += 1,
                (false, true) => self.fn_[class] += 1,
                (false, false) => self.tn[class] += 1,
            }
        }
        self.total += 1;
    }

    /// Merge another tally into this one (concatenation over examples).
    pub fn merge(&mut self, other: &ConfusionCounts) {
        debug_assert_eq!(self.num_classes(), other.num_classes());
        for c in 0..self.num_classes() {
            self.tp[c] += other.tp[c];
            self.tn[c] += other.tn[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
        self.total += other.total;
    }

    #[inline]
    pub fn num_classes(&self) -> usize {
        self.tp.len()
    }

    /// Per-class recall `TP / (TP + FN)`; `None` for classes with no
    /// ground-truth examples.
    pub fn per_class_recall(&self) -> Vec<Option<f64>> {
        (0..self.num_classes())
            .map(|c| {
                let denom = self.tp[c] + self.fn_[c];
                (denom > 0).then(|| self.tp[c] as f64 / denom as f64)
            })
            .collect()
    }

    /// Plain (micro) accuracy: correct predictions over total.
    pub fn plain_accuracy(&self) -> f64 {
        let correct: u64 = self.tp.iter().sum();
        correct as f64 / self.total as f64
    }

    fn check_consistent(&self) -> Result<()> {
        if self.total == 0 {
            return Err(Error::domain("confusion counts cover zero examples"));
        }
        for c in 0..self.num_classes() {
            let row = self.tp[c] + self.tn[c] + self.fp[c] + self.fn_[c];
            if row != self.total {
                return Err(Error::domain(format!(
                    "class {c} counts sum to {row}, expected total {}",
                    self.total
                )));
            }
        }
        Ok(())
    }
}

/// Macro accuracy: the mean over classes of `(TP + TN) / (TP + TN + FP + FN)`.
pub fn macro_accuracy(counts: &ConfusionCounts) -> Result<f64> {
    counts.check_consistent()?;
    let n = counts.num_classes() as f64;
    let sum: f64 = (0..counts.num_classes())
        .map(|c| {
            let denom = counts.tp[c] + counts.tn[c] + counts.fp[c] + counts.fn_[c];
            (counts.tp[c] + counts.tn[c]) as f64 / denom as f64
        })
        .sum();
    Ok(sum / n)
}

/// Outcome of a mean-IoU computation; classes whose union was zero even after
/// concatenating the whole test set are excluded from the mean and reported.
#[derive(Debug, Clone, PartialEq)]
pub struct MiouOutcome {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub skipped_classes: Vec<usize>,
}

/// Mean IoU: the mean over classes of `TP / (TP + FP + FN)`, computed on
/// counts already aggregated (concatenated) over the full test set.
pub fn miou(counts: &ConfusionCounts) -> Result<MiouOutcome> {
    if counts.total == 0 {
        return Err(Error::domain("mIoU needs at least one example"));
    }
    let mut per_class_iou = Vec::with_capacity(counts.num_classes());
    let mut skipped_classes = Vec::new();
    let mut sum = 0.0;
    let mut used = 0usize;
    for c in 0..counts.num_classes() {
        let union = counts.tp[c] + counts.fp[c] + counts.fn_[c];
        if union == 0 {
            per_class_iou.push(None);
            skipped_classes.push(c);
        } else {
            let iou = counts.tp[c] as f64 / union as f64;
            per_class_iou.push(Some(iou));
            sum += iou;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::domain(
            "every class has zero union; mIoU is undefined",
        ));
    }
    Ok(MiouOutcome {
        miou: sum / used as f64,
        per_class_iou,
        skipped_classes,
    })
}

/// Share of examples whose prediction set contains more than one class.
pub fn uncertainty_fraction(sets: &[PredictionSet]) -> Result<f64> {
    if sets.is_empty() {
        return Err(Error::domain("uncertainty fraction of an empty list"));
    }
    let uncertain = sets.iter().filter(|s| s.cardinality() > 1).count();
    Ok(uncertain as f64 / sets.len() as f64)
}

/// Share of empty prediction sets.
pub fn pruned_fraction(sets: &[PredictionSet]) -> Result<f64> {
    if sets.is_empty() {
        return Err(Error::domain("pruned fraction of an empty list"));
    }
    let pruned = sets.iter().filter(|s| s.is_empty()).count();
    Ok(pruned as f64 / sets.len() as f64)
}

/// Max minus min of the per-class mean weights.
pub fn weight_range(per_class_mean_weights: &[f64]) -> Result<f64> {
    if per_class_mean_weights.is_empty() {
        return Err(Error::domain("weight range of an empty list"));
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &w in per_class_mean_weights {
        min = min.min(w);
        max = max.max(w);
    }
    Ok(max - min)
}
