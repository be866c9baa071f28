//! Repeated seeded runs of the full model and each single-source ablation.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    encode_all, evaluate_encoded, labels_of, stratified_split, train_encoded, Metrics, TrainConfig,
    METRIC_NAMES,
};
use crate::embedding::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::model::Ablation;
use crate::ontology::Ontology;
use crate::trace::UserTrace;

pub const ABLATIONS: [Ablation; 4] = [
    Ablation::FULL,
    Ablation {
        no_temporal: true,
        no_ontology: false,
        no_entity: false,
    },
    Ablation {
        no_temporal: false,
        no_ontology: true,
        no_entity: false,
    },
    Ablation {
        no_temporal: false,
        no_ontology: false,
        no_entity: true,
    },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub ablation: Ablation,
    pub mean: Metrics,
    /// Sample standard deviation over the runs.
    pub std: Metrics,
    /// Test metrics of every run, in seed order.
    pub runs: Vec<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub first_seed: u64,
    pub runs: usize,
    pub memory_size: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let last = self.first_seed + self.runs as u64 - 1;
        let _ = writeln!(
            out,
            "test metrics, mean ± std over {} seeded runs (seeds {}..={}), memory size {}",
            self.runs, self.first_seed, last, self.memory_size
        );
        let _ = write!(out, "{:<12}", "model");
        for name in METRIC_NAMES {
            let _ = write!(out, "  {name:<15}");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{:<12}", row.name);
            for (m, s) in row.mean.as_array().iter().zip(row.std.as_array()) {
                let _ = write!(out, "  {:<15}", format!("{m:.3} ± {s:.3}"));
            }
            out.push('\n');
        }
        out
    }
}

fn mean_std(runs: &[Metrics]) -> (Metrics, Metrics) {
    let n = runs.len() as f64;
    let mut mean = [0.0; 4];
    for r in runs {
        for (m, v) in mean.iter_mut().zip(r.as_array()) {
            *m += v / n;
        }
    }
    let mut var = [0.0; 4];
    for r in runs {
        for ((s, v), m) in var.iter_mut().zip(r.as_array()).zip(mean) {
            *s += (v - m) * (v - m) / (n - 1.0);
        }
    }
    (
        Metrics::from_array(mean),
        Metrics::from_array(var.map(f64::sqrt)),
    )
}

/// Trains the full model and the three ablations `runs` times each with seeds
/// `config.seed..config.seed + runs` and reports test-split metrics. Runs
/// execute in parallel; results are merged in seed order. The ablation flags
/// already set in `config` are ignored.
pub fn run_ablations(
    data: &[UserTrace],
    ontology: &Ontology,
    provider: &EmbeddingProvider,
    config: &TrainConfig,
    runs: usize,
) -> Result<AblationTable> {
    run_ablation_set(data, ontology, provider, config, runs, &ABLATIONS)
}

/// [`run_ablations`] restricted to the given rows. Every row sees the same
/// splits: the split of run `r` depends only on its seed.
pub fn run_ablation_set(
    data: &[UserTrace],
    ontology: &Ontology,
    provider: &EmbeddingProvider,
    config: &TrainConfig,
    runs: usize,
    ablations: &[Ablation],
) -> Result<AblationTable> {
    if runs < 2 {
        return Err(Error::Config("need ≥2 runs for std".into()));
    }
    if ablations.is_empty() {
        return Err(Error::Config("no ablation rows requested".into()));
    }
    config.validate()?;
    let encoded = ablations
        .iter()
        .map(|&ablation| {
            let c = TrainConfig {
                ablation,
                ..config.clone()
            };
            encode_all(
                data,
                &c.model_config(provider.dim(), ontology),
                ontology,
                provider,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = labels_of(&encoded[0])?;

    let jobs: Vec<(usize, u64)> = (0..ablations.len())
        .flat_map(|a| (0..runs as u64).map(move |r| (a, config.seed + r)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(a, seed)| {
            let c = TrainConfig {
                ablation: ablations[a],
                seed,
                ..config.clone()
            };
            let split = stratified_split(&labels, c.split, seed);
            let test: Vec<_> = split.test.iter().map(|&i| encoded[a][i].clone()).collect();
            let outcome = train_encoded(
                &encoded[a],
                &labels,
                split,
                c.model_config(provider.dim(), ontology),
                &c,
            )?;
            evaluate_encoded(&outcome.model, &test)
        })
        .collect::<Result<Vec<_>>>()?;

    let rows = ablations
        .iter()
        .zip(results.chunks(runs))
        .map(|(ablation, per_seed)| {
            let (mean, std) = mean_std(per_seed);
            AblationRow {
                name: ablation.label(),
                ablation: *ablation,
                mean,
                std,
                runs: per_seed.to_vec(),
            }
        })
        .collect();
    Ok(AblationTable {
        first_seed: config.seed,
        runs,
        memory_size: config.memory_size,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_sample_std() {
        let a = Metrics::from_array([0.8, 0.5, 0.4, 0.6]);
        let b = Metrics::from_array([0.6, 0.5, 0.2, 0.6]);
        let (m, s) = mean_std(&[a, b]);
        assert!((m.auc - 0.7).abs() < 1e-15);
        assert!((s.auc - 0.02f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.f1, 0.0);
    }

    #[test]
    fn render_layout() {
        let m = Metrics::from_array([0.9, 0.5, 0.25, 1.0]);
        let rows = ABLATIONS
            .iter()
            .map(|a| AblationRow {
                name: a.label(),
                ablation: *a,
                mean: m,
                std: m,
                runs: vec![m, m],
            })
            .collect();
        let t = AblationTable {
            first_seed: 3,
            runs: 2,
            memory_size: 200,
            rows,
        };
        let text = t.render();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 6);
        assert!(lines[0].contains("seeds 3..=4"));
        assert!(lines[1].starts_with("model") && lines[1].contains("Precision"));
        assert!(lines[2].starts_with("full") && lines[2].contains("0.900 ± 0.900"));
        assert!(lines[5].starts_with("no_entity"));
        assert_eq!(t.row("no_ontology").unwrap().ablation, ABLATIONS[2]);
    }
}
