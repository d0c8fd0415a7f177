//! Binary-classification scoring: thresholding, confusion counts, rates,
//! ROC curves and AUC.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Hard decision: positive iff `p > tau` (ties go negative).
#[inline]
pub fn threshold<T: Scalar>(p: T, tau: T) -> Label {
    Label::from_bool(p > tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion(labels: &[Label], predictions: &[Label]) -> Result<ConfusionMatrix> {
    if labels.len() != predictions.len() {
        return Err(Error::shape(
            "confusion",
            format!("{} labels vs {} predictions", labels.len(), predictions.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::invalid("confusion matrix of zero samples"));
    }
    let mut cm = ConfusionMatrix::default();
    for (&y, &p) in labels.iter().zip(predictions) {
        match (y, p) {
            (Label::Positive, Label::Positive) => cm.tp += 1,
            (Label::Positive, Label::Negative) => cm.fn_ += 1,
            (Label::Negative, Label::Negative) => cm.tn += 1,
            (Label::Negative, Label::Positive) => cm.fp += 1,
        }
    }
    Ok(cm)
}

/// Accuracy, sensitivity and specificity. A rate whose class is absent is
/// `None` rather than a fabricated 0 or 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates<T> {
    pub accuracy: T,
    pub sensitivity: Option<T>,
    pub specificity: Option<T>,
}

pub fn acc_sen_spe<T: Scalar>(cm: &ConfusionMatrix) -> Result<Rates<T>> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::invalid("rates of an empty confusion matrix"));
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| T::from_count(num) / T::from_count(den));
    Ok(Rates {
        accuracy: T::from_count(cm.tp + cm.tn) / T::from_count(n),
        sensitivity: ratio(cm.tp, cm.tp + cm.fn_),
        specificity: ratio(cm.tn, cm.tn + cm.fp),
    })
}

/// ROC curve as `(fpr, tpr)` points from `(0, 0)` to `(1, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve<T> {
    pub points: Vec<(T, T)>,
}

impl<T: Scalar> RocCurve<T> {
    /// `fpr,tpr` CSV with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fpr,tpr\n");
        for (f, t) in &self.points {
            out.push_str(&format!("{},{}\n", f.as_f64(), t.as_f64()));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Builds the ROC curve by sweeping the threshold down through the distinct
/// scores. Tied scores move both rates in one step, producing a diagonal
/// segment.
pub fn roc_curve<T: Scalar>(labels: &[Label], scores: &[T]) -> Result<RocCurve<T>> {
    if labels.len() != scores.len() {
        return Err(Error::shape(
            "roc_curve",
            format!("{} labels vs {} scores", labels.len(), scores.len()),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("roc_curve: NaN score"));
    }
    let pos = labels.iter().filter(|l| l.is_positive()).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("roc_curve needs both classes present"));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));

    let (p, n) = (T::from_count(pos), T::from_count(neg));
    let mut points = vec![(T::zero(), T::zero())];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]].is_positive() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((T::from_count(fp) / n, T::from_count(tp) / p));
    }
    Ok(RocCurve { points })
}

/// Trapezoidal area under the curve.
pub fn auc<T: Scalar>(curve: &RocCurve<T>) -> T {
    let two = T::lit(2.0);
    curve
        .points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / two)
        .sum()
}
