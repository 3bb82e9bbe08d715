//! Overlap metrics between binary segmentations.
//!
//! Degenerate cases: when prediction and ground truth are both empty every
//! metric is 1; otherwise a metric whose denominator is zero is 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// `p >= threshold` per pixel.
pub fn binarize<E: Copy + Into<f64>>(probs: &[E], threshold: f64) -> Vec<bool> {
    probs.iter().map(|&p| p.into() >= threshold).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&mut self, other: &Self) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    fn both_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    fn ratio(&self, num: u64, den: u64) -> f64 {
        if self.both_empty() {
            1.0
        } else if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    pub fn dsc(&self) -> f64 {
        self.ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn iou(&self) -> f64 {
        self.ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn precision(&self) -> f64 {
        self.ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        self.ratio(self.tp, self.tp + self.fn_)
    }

    pub fn record(&self) -> MetricRecord {
        MetricRecord {
            dsc: self.dsc(),
            iou: self.iou(),
            precision: self.precision(),
            recall: self.recall(),
        }
    }
}

/// Pixel counts of prediction `s` against ground truth `g`.
pub fn confusion(s: &[bool], g: &[bool]) -> Result<ConfusionCounts> {
    if s.len() != g.len() {
        return Err(Error::Shape(format!("confusion: {} vs {} pixels", s.len(), g.len())));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in s.iter().zip(g) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn dsc(c: &ConfusionCounts) -> f64 {
    c.dsc()
}

pub fn iou(c: &ConfusionCounts) -> f64 {
    c.iou()
}

pub fn precision(c: &ConfusionCounts) -> f64 {
    c.precision()
}

pub fn recall(c: &ConfusionCounts) -> f64 {
    c.recall()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub dsc: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

impl MetricRecord {
    pub fn as_array(&self) -> [f64; 4] {
        [self.dsc, self.iou, self.precision, self.recall]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self { dsc: a[0], iou: a[1], precision: a[2], recall: a[3] }
    }
}

/// Arithmetic mean of each metric.
pub fn fold_mean(records: &[MetricRecord]) -> Result<MetricRecord> {
    if records.is_empty() {
        return Err(Error::Data("fold_mean of an empty list".into()));
    }
    let n = records.len() as f64;
    let mut acc = [0.0; 4];
    for r in records {
        for (a, v) in acc.iter_mut().zip(r.as_array()) {
            *a += v;
        }
    }
    Ok(MetricRecord::from_array(acc.map(|a| a / n)))
}

/// Sample standard deviation of each metric (0 for a single record).
pub fn fold_std(records: &[MetricRecord]) -> Result<MetricRecord> {
    let mean = fold_mean(records)?.as_array();
    if records.len() < 2 {
        return Ok(MetricRecord::default());
    }
    let mut acc = [0.0; 4];
    for r in records {
        for ((a, v), m) in acc.iter_mut().zip(r.as_array()).zip(mean) {
            *a += (v - m) * (v - m);
        }
    }
    let n = (records.len() - 1) as f64;
    Ok(MetricRecord::from_array(acc.map(|a| (a / n).sqrt())))
}

/// Accumulates slice-level counts into per-subject records.
#[derive(Clone, Debug, Default)]
pub struct SubjectAccumulator {
    subjects: Vec<(String, ConfusionCounts)>,
}

impl SubjectAccumulator {
    pub fn add(&mut self, subject: &str, counts: &ConfusionCounts) {
        match self.subjects.iter_mut().find(|(s, _)| s == subject) {
            Some((_, c)) => c.merge(counts),
            None => self.subjects.push((subject.to_string(), *counts)),
        }
    }

    pub fn per_subject(&self) -> Vec<(String, MetricRecord)> {
        self.subjects.iter().map(|(s, c)| (s.clone(), c.record())).collect()
    }

    /// Mean of the per-subject records.
    pub fn mean(&self) -> Result<MetricRecord> {
        let records: Vec<MetricRecord> = self.subjects.iter().map(|(_, c)| c.record()).collect();
        fold_mean(&records)
    }
}
