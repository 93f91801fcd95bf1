//! AUROC and F1 for binary scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores in `[0, 1]` paired with binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredBatch {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoredBatch {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::shape("scored batch", &[scores.len()], &[labels.len()]));
        }
        if scores.is_empty() {
            return Err(Error::Empty("scored batch"));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Config("labels must be 0 or 1".into()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite { op: "scored batch" });
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half. Computed from midranks (Mann-Whitney U).
pub fn auroc(batch: &ScoredBatch) -> Result<f64> {
    let n = batch.len();
    let n_pos = batch.labels.iter().filter(|&&l| l == 1).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| batch.scores[a].total_cmp(&batch.scores[b]));

    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && batch.scores[order[j + 1]] == batch.scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let midrank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if batch.labels[idx] == 1 {
                pos_rank_sum += midrank;
            }
        }
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    let u = pos_rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * q))
}

/// F1 of `score >= threshold` predictions; zero when precision + recall is 0.
pub fn f1(batch: &ScoredBatch, threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (&s, &y) in batch.scores.iter().zip(&batch.labels) {
        match (s >= threshold, y == 1) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            (false, false) => {}
        }
    }
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// AUROC (when defined), F1 and sample count of one evaluation group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auroc: Option<f64>,
    pub f1: f64,
    pub count: usize,
    pub positives: usize,
}

impl Metrics {
    pub fn compute(batch: &ScoredBatch, threshold: f64) -> Self {
        Self {
            auroc: auroc(batch).ok(),
            f1: f1(batch, threshold),
            count: batch.len(),
            positives: batch.labels.iter().filter(|&&l| l == 1).count(),
        }
    }
}
