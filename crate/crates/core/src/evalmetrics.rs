//! Classification and ranking metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {predictions} predictions vs {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("no samples")]
    Empty,
    #[error("label {0} outside {{0, 1}}")]
    BadLabel(u8),
    #[error("rank must be >= 1")]
    BadRank,
    #[error("k must be >= 1")]
    BadK,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub f1: f64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    /// Precision was 0/0 and set to 0.
    pub precision_undefined: bool,
    /// F1 was 0/0 and set to 0.
    pub f1_undefined: bool,
    /// Every prediction had the same label.
    pub degenerate: bool,
}

impl ClassificationMetrics {
    pub fn from_counts(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        let total = tp + fp + tn + fn_;
        let accuracy = if total == 0 { 0.0 } else { (tp + tn) as f64 / total as f64 };
        let (precision, precision_undefined) = ratio(tp, tp + fp);
        let (recall, _) = ratio(tp, tp + fn_);
        let (f1, f1_undefined) =
            if precision + recall == 0.0 { (0.0, true) } else { (2.0 * precision * recall / (precision + recall), false) };
        let degenerate = tp + fp == 0 || tn + fn_ == 0;
        ClassificationMetrics { accuracy, precision, f1, tp, fp, tn, fn_, precision_undefined, f1_undefined, degenerate }
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_).0
    }
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn classification_metrics(predictions: &[u8], labels: &[u8]) -> Result<ClassificationMetrics, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { predictions: predictions.len(), labels: labels.len() });
    }
    if labels.is_empty() {
        return Err(MetricsError::Empty);
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p, y) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 0) => tn += 1,
            (0, 1) => fn_ += 1,
            (p, 0 | 1) => return Err(MetricsError::BadLabel(p)),
            (_, y) => return Err(MetricsError::BadLabel(y)),
        }
    }
    Ok(ClassificationMetrics::from_counts(tp, fp, tn, fn_))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub ks: Vec<usize>,
    pub hr: BTreeMap<usize, f64>,
    pub mrr: BTreeMap<usize, f64>,
    pub n_users: usize,
}

/// HR@k and MRR@k from the 1-based rank of each user's ground-truth item.
///
/// Reciprocal ranks are summed in ascending-rank order so the result does
/// not depend on user order.
pub fn ranking_metrics(ranks: &[usize], ks: &[usize]) -> Result<RankingMetrics, MetricsError> {
    if ranks.is_empty() {
        return Err(MetricsError::Empty);
    }
    if ranks.contains(&0) {
        return Err(MetricsError::BadRank);
    }
    if ks.contains(&0) {
        return Err(MetricsError::BadK);
    }
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let n = sorted.len() as f64;
    let mut hr = BTreeMap::new();
    let mut mrr = BTreeMap::new();
    for &k in ks {
        let within = sorted.partition_point(|&r| r <= k);
        hr.insert(k, within as f64 / n);
        let rr: f64 = sorted[..within].iter().map(|&r| 1.0 / r as f64).sum();
        mrr.insert(k, rr / n);
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    Ok(RankingMetrics { ks, hr, mrr, n_users: ranks.len() })
}
