//! Pixel confusion counts and the precision / recall / F1 / OA / IoU scores.

use std::fmt;
use std::ops::{Add, AddAssign};

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};

/// Pixel counts of a binary change prediction against a reference mask.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Counts of a single prediction / label pair.
    pub fn from_masks(pred: ArrayView2<'_, u8>, label: ArrayView2<'_, u8>) -> Result<Self> {
        accumulate(pred, label, Self::default())
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, tn: self.tn + o.tn, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_ }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Add the per-pixel outcomes of `pred` against `label` to `counts`.
/// Any non-zero value counts as positive.
pub fn accumulate(pred: ArrayView2<'_, u8>, label: ArrayView2<'_, u8>, counts: ConfusionCounts) -> Result<ConfusionCounts> {
    if pred.dim() != label.dim() {
        return Err(Error::Shape(format!("prediction {:?} vs label {:?}", pred.dim(), label.dim())));
    }
    let mut c = counts;
    for (&p, &y) in pred.iter().zip(label.iter()) {
        match (p != 0, y != 0) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// A score that is either a number or undefined because of a 0/0 division.
#[derive(Debug, Clone, PartialEq)]
pub enum Ratio {
    Value(f64),
    Undefined { reason: &'static str },
}

impl Ratio {
    fn of(num: u64, den: u64, reason: &'static str) -> Self {
        if den == 0 {
            Ratio::Undefined { reason }
        } else {
            Ratio::Value(num as f64 / den as f64)
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Ratio::Value(v) => Some(*v),
            Ratio::Undefined { .. } => None,
        }
    }

    pub fn is_defined(&self) -> bool {
        matches!(self, Ratio::Value(_))
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ratio::Value(v) => write!(f, "{v:.6}"),
            Ratio::Undefined { reason } => write!(f, "undefined ({reason})"),
        }
    }
}

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Ratio::Value(v) => s.serialize_f64(*v),
            Ratio::Undefined { reason } => s.serialize_str(&format!("undefined: {reason}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub counts: ConfusionCounts,
    pub precision: Ratio,
    pub recall: Ratio,
    pub f1: Ratio,
    pub oa: Ratio,
    pub iou: Ratio,
}

/// Evaluate the five scores. Fails on empty counts.
pub fn compute(counts: &ConfusionCounts) -> Result<MetricsReport> {
    if counts.total() == 0 {
        return Err(Error::Data("no pixels were evaluated".into()));
    }
    let ConfusionCounts { tp, tn, fp, fn_ } = *counts;
    let precision = Ratio::of(tp, tp + fp, "no positive predictions");
    let recall = Ratio::of(tp, tp + fn_, "no positive labels");
    let f1 = match (precision.value(), recall.value()) {
        (Some(p), Some(r)) if p + r > 0.0 => Ratio::Value(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Ratio::Undefined { reason: "precision and recall are both zero" },
        (None, _) => Ratio::Undefined { reason: "precision is undefined" },
        (_, None) => Ratio::Undefined { reason: "recall is undefined" },
    };
    let oa = Ratio::of(tp + tn, counts.total(), "no pixels");
    let iou = Ratio::of(tp, tp + fp + fn_, "no positive predictions or labels");
    Ok(MetricsReport { counts: *counts, precision, recall, f1, oa, iou })
}

impl MetricsReport {
    /// `key = value` lines.
    pub fn to_key_value(&self) -> String {
        let c = &self.counts;
        format!(
            "tp = {}\ntn = {}\nfp = {}\nfn = {}\nprecision = {}\nrecall = {}\nf1 = {}\noa = {}\niou = {}\n",
            c.tp, c.tn, c.fp, c.fn_, self.precision, self.recall, self.f1, self.oa, self.iou
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn table_header() -> &'static str {
        "|      P |      R |     F1 |     OA |    IoU |"
    }

    /// One table row with scores in percent.
    pub fn table_row(&self) -> String {
        let cell = |r: &Ratio| match r.value() {
            Some(v) => format!("{:>6.2}", 100.0 * v),
            None => format!("{:>6}", "n/a"),
        };
        format!(
            "| {} | {} | {} | {} | {} |",
            cell(&self.precision),
            cell(&self.recall),
            cell(&self.f1),
            cell(&self.oa),
            cell(&self.iou)
        )
    }
}
