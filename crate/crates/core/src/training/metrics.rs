//! Ranking and threshold metrics.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

impl Metrics {
    pub fn as_array(&self) -> [f64; 4] {
        [self.auc, self.f1, self.precision, self.recall]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Metrics {
            auc: a[0],
            f1: a[1],
            precision: a[2],
            recall: a[3],
        }
    }
}

pub const METRIC_NAMES: [&str; 4] = ["AUC", "F1", "Precision", "Recall"];

/// Twice the Mann–Whitney U statistic (concordant pairs count 2, ties 1) and
/// the number of positive–negative pairs. Scores are compared with
/// `total_cmp`, so callers must not pass NaN.
pub fn auc_pair_counts(scores: &[f64], labels: &[bool]) -> (u128, u128) {
    assert_eq!(scores.len(), labels.len(), "one label per score");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut doubled = 0u128;
    let mut neg_below = 0u128;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < order.len() && scores[order[j]].total_cmp(&scores[order[i]]) == Ordering::Equal {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        doubled += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    let p = labels.iter().filter(|&&l| l).count() as u128;
    (doubled, p * (labels.len() as u128 - p))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. `None` when either class is absent.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (doubled, pairs) = auc_pair_counts(scores, labels);
    (pairs > 0).then(|| doubled as f64 / (2 * pairs) as f64)
}

/// Precision, recall and F1 with a positive call at `score ≥ 0.5`.
pub fn threshold_metrics(scores: &[f64], labels: &[bool]) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= DECISION_THRESHOLD, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let ratio = |a: usize, b: usize| {
        if a + b == 0 {
            0.0
        } else {
            a as f64 / (a + b) as f64
        }
    };
    let precision = ratio(tp, fp);
    let recall = ratio(tp, fneg);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (precision, recall, f1)
}

pub fn compute_metrics(scores: &[f64], labels: &[bool]) -> Result<Metrics> {
    if scores.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty set".into()));
    }
    let (precision, recall, f1) = threshold_metrics(scores, labels);
    match auc(scores, labels) {
        Some(auc) => Ok(Metrics {
            auc,
            f1,
            precision,
            recall,
        }),
        None => Err(Error::AucUndefined {
            precision,
            recall,
            f1,
        }),
    }
}
