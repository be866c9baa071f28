//! Per-user attention summaries grouped by how long ago each entity occurred.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::embedding::EmbeddingProvider;
use crate::error::Result;
use crate::model::{AttentionReport, EntityAttention, Model};
use crate::ontology::Ontology;
use crate::trace::UserTrace;
use crate::training::encode_all;

const DAY: i64 = 86_400;

/// Recency buckets in display order: oldest first. Each bound is inclusive.
pub const BUCKETS: [(&str, Option<i64>); 10] = [
    ("> One Year", None),
    ("≤ One Year", Some(365 * DAY)),
    ("≤ Half Year", Some(182 * DAY)),
    ("≤ Three Months", Some(90 * DAY)),
    ("≤ Two Months", Some(60 * DAY)),
    ("≤ One Month", Some(30 * DAY)),
    ("≤ Three Weeks", Some(21 * DAY)),
    ("≤ Two Weeks", Some(14 * DAY)),
    ("≤ One Week", Some(7 * DAY)),
    ("≤ One Day", Some(DAY)),
];

/// Index into [`BUCKETS`] of the tightest bucket containing `recency_secs`.
pub fn bucket_index(recency_secs: i64) -> usize {
    BUCKETS
        .iter()
        .rposition(|(_, bound)| bound.is_some_and(|b| recency_secs <= b))
        .unwrap_or(0)
}

pub fn bucket_label(recency_secs: i64) -> &'static str {
    BUCKETS[bucket_index(recency_secs)].0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketEntry {
    pub text: String,
    pub timestamp: i64,
    pub days_ago: f64,
    pub weight: f64,
    pub temporal: f64,
    pub ontology: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bucket {
    pub label: &'static str,
    /// Entities in the bucket; only the `top_k` heaviest are kept.
    pub total: usize,
    pub entities: Vec<BucketEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Explanation {
    pub user_id: String,
    pub probability: f64,
    pub fusion: [f64; 2],
    pub buckets: Vec<Bucket>,
}

/// Groups the attention of one prediction into non-empty recency buckets,
/// keeping the `top_k` largest fused weights in each.
pub fn explain_user(report: &AttentionReport, top_k: usize) -> Explanation {
    let mut grouped: Vec<Vec<&EntityAttention>> = vec![Vec::new(); BUCKETS.len()];
    for e in &report.entities {
        grouped[bucket_index(e.recency_secs)].push(e);
    }
    let buckets = grouped
        .into_iter()
        .enumerate()
        .filter(|(_, g)| !g.is_empty())
        .map(|(i, mut g)| {
            g.sort_by(|a, b| {
                b.fused
                    .total_cmp(&a.fused)
                    .then(b.timestamp.cmp(&a.timestamp))
                    .then(a.text.cmp(&b.text))
            });
            Bucket {
                label: BUCKETS[i].0,
                total: g.len(),
                entities: g
                    .into_iter()
                    .take(top_k)
                    .map(|e| BucketEntry {
                        text: e.text.clone(),
                        timestamp: e.timestamp,
                        days_ago: e.recency_secs as f64 / DAY as f64,
                        weight: e.fused,
                        temporal: e.temporal,
                        ontology: e.ontology,
                    })
                    .collect(),
            }
        })
        .collect();
    Explanation {
        user_id: report.user_id.clone(),
        probability: report.probability,
        fusion: report.fusion,
        buckets,
    }
}

/// Explanations for every trace, sorted by user id.
pub fn explain_all(
    model: &Model,
    traces: &[UserTrace],
    ontology: &Ontology,
    provider: &EmbeddingProvider,
    top_k: usize,
) -> Result<Vec<Explanation>> {
    let encoded = encode_all(traces, &model.config, ontology, provider)?;
    let mut out = encoded
        .par_iter()
        .map(|x| model.forward_encoded(x).map(|r| explain_user(&r, top_k)))
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    Ok(out)
}

impl Explanation {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.user_id);
        let _ = writeln!(s, "DEPRESSION ({:.2}%)", 100.0 * self.probability);
        let _ = writeln!(
            s,
            "channel weights: temporal {:.3}, ontology {:.3}",
            self.fusion[0], self.fusion[1]
        );
        for b in &self.buckets {
            let _ = writeln!(s, "  {} ({} entities)", b.label, b.total);
            for e in &b.entities {
                let _ = writeln!(
                    s,
                    "    {:.4}  {}  ({:.1} days ago)",
                    e.weight, e.text, e.days_ago
                );
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucket_bounds_are_inclusive() {
        assert_eq!(bucket_label(0), "≤ One Day");
        assert_eq!(bucket_label(DAY), "≤ One Day");
        assert_eq!(bucket_label(DAY + 1), "≤ One Week");
        assert_eq!(bucket_label(7 * DAY), "≤ One Week");
        assert_eq!(bucket_label(31 * DAY), "≤ Two Months");
        assert_eq!(bucket_label(365 * DAY), "≤ One Year");
        assert_eq!(bucket_label(365 * DAY + 1), "> One Year");
    }

    fn att(text: &str, days: i64, fused: f64) -> EntityAttention {
        EntityAttention {
            text: text.into(),
            timestamp: 1_000 * DAY - days * DAY,
            recency_secs: days * DAY,
            temporal: fused,
            ontology: fused,
            fused,
        }
    }

    #[test]
    fn groups_in_display_order_and_truncates() {
        let report = AttentionReport {
            user_id: "u".into(),
            probability: 0.87654,
            fusion: [0.4, 0.6],
            entities: vec![
                att("a", 3, 0.1),
                att("b", 400, 0.2),
                att("c", 5, 0.3),
                att("d", 6, 0.25),
                att("e", 0, 0.15),
            ],
        };
        let x = explain_user(&report, 2);
        let labels: Vec<_> = x.buckets.iter().map(|b| b.label).collect();
        assert_eq!(labels, ["> One Year", "≤ One Week", "≤ One Day"]);
        let week = &x.buckets[1];
        assert_eq!(week.total, 3);
        let texts: Vec<_> = week.entities.iter().map(|e| e.text.as_str()).collect();
        assert_eq!(texts, ["c", "d"]);
        assert!(x.render().contains("DEPRESSION (87.65%)"));
    }
}
