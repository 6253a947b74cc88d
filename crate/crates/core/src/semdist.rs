//! Mean Manhattan distance, mean Euclidean distance and mean cosine
//! similarity between two embedding sets, over their shared subjects.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedsvc::EmbeddingSet;

#[derive(Debug, Error, PartialEq)]
pub enum DistanceError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("the two sets share no subjects")]
    EmptyIntersection,
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = CompensatedSum::default();
        iter.into_iter().for_each(|x| s.add(x));
        s
    }
}

pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().collect::<CompensatedSum>().value()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDistance {
    pub subject_id: String,
    pub manhattan: f64,
    pub euclidean: f64,
    /// `None` when either vector is all zeros.
    pub cosine: Option<f64>,
}

/// Per-pair distances. Inner sums are compensated.
pub fn pair_distance(subject_id: &str, a: &[f64], b: &[f64]) -> PairDistance {
    let manhattan = compensated_sum(a.iter().zip(b).map(|(x, y)| (x - y).abs()));
    let squared = compensated_sum(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)));
    let dot = compensated_sum(a.iter().zip(b).map(|(x, y)| x * y));
    let norm_a = compensated_sum(a.iter().map(|x| x * x));
    let norm_b = compensated_sum(b.iter().map(|x| x * x));
    let cosine = (norm_a > 0.0 && norm_b > 0.0).then(|| (dot / (norm_a * norm_b).sqrt()).clamp(-1.0, 1.0));
    PairDistance { subject_id: subject_id.to_string(), manhattan, euclidean: squared.sqrt(), cosine }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub n: usize,
    pub d: usize,
    pub mean_manhattan: f64,
    pub mean_euclidean: f64,
    /// Mean cosine similarity over pairs where it is defined.
    pub mean_cosine: f64,
    /// Pairs excluded from the cosine mean because of a zero vector.
    pub cosine_undefined: usize,
    /// Subjects present in only one of the two sets.
    pub skipped: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_subject: Vec<PairDistance>,
}

/// Compares `a` and `b` subject by subject over their intersection.
pub fn compare_sets(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<DistanceReport, DistanceError> {
    if a.dim != b.dim {
        return Err(DistanceError::DimensionMismatch(a.dim, b.dim));
    }
    let shared: Vec<(&str, &[f64], &[f64])> =
        a.vectors.iter().filter_map(|(id, va)| b.get(id).map(|vb| (id.as_str(), va.as_slice(), vb))).collect();
    if shared.is_empty() {
        return Err(DistanceError::EmptyIntersection);
    }
    let skipped: Vec<String> =
        a.vectors.keys().filter(|k| b.get(k).is_none()).chain(b.vectors.keys().filter(|k| a.get(k).is_none())).cloned().collect();

    // Terms are computed in parallel but reduced in subject order, so the
    // result does not depend on scheduling.
    let pairs: Vec<PairDistance> = shared.par_iter().map(|(id, x, y)| pair_distance(id, x, y)).collect();
    let n = pairs.len();
    let cosines: Vec<f64> = pairs.iter().filter_map(|p| p.cosine).collect();
    let report = DistanceReport {
        n,
        d: a.dim,
        mean_manhattan: compensated_sum(pairs.iter().map(|p| p.manhattan)) / n as f64,
        mean_euclidean: compensated_sum(pairs.iter().map(|p| p.euclidean)) / n as f64,
        mean_cosine: if cosines.is_empty() { f64::NAN } else { compensated_sum(cosines.iter().copied()) / cosines.len() as f64 },
        cosine_undefined: n - cosines.len(),
        skipped,
        per_subject: pairs,
    };
    Ok(report)
}

/// Values measured on the full-scale corpus (1,024-d encoder, LLM-processed
/// vs raw-review embeddings). Printed for context only; the fallback
/// embedder cannot reproduce them.
pub struct ReferenceDistances {
    pub label: &'static str,
    pub mean_cosine: f64,
    pub mean_euclidean: f64,
    pub mean_manhattan: f64,
}

pub const REFERENCE_DISTANCES: [ReferenceDistances; 2] = [
    ReferenceDistances { label: "users", mean_cosine: 0.94, mean_euclidean: 7.62, mean_manhattan: 194.09 },
    ReferenceDistances { label: "items", mean_cosine: 0.95, mean_euclidean: 6.84, mean_manhattan: 174.87 },
];

/// Plain-text table of the measured means, with the reference values as a
/// footer.
pub fn render_summary(users: &DistanceReport, items: &DistanceReport) -> String {
    let mut out = String::from("subjects  n      cosine  euclidean  manhattan\n");
    for (label, r) in [("users", users), ("items", items)] {
        out += &format!("{label:<8}  {:<5}  {:>6.3}  {:>9.3}  {:>9.3}\n", r.n, r.mean_cosine, r.mean_euclidean, r.mean_manhattan);
    }
    out += "reference (1,024-d encoder, full corpus):\n";
    for r in &REFERENCE_DISTANCES {
        out += &format!("{:<8}  {:<5}  {:>6.2}  {:>9.2}  {:>9.2}\n", r.label, "", r.mean_cosine, r.mean_euclidean, r.mean_manhattan);
    }
    out
}
