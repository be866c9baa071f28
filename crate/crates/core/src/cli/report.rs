//! Deterministic text reports; no timings or paths that vary between runs.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Ablation;
use crate::ontology::Ontology;
use crate::trace::UserTrace;
use crate::training::{EpochRecord, Metrics, TrainConfig, TrainOutcome, METRIC_NAMES};

/// Metrics in [`METRIC_NAMES`] order; an undefined AUC keeps the threshold
/// metrics.
fn metric_values(metrics: &Result<Metrics>) -> [Option<f64>; 4] {
    match metrics {
        Ok(m) => m.as_array().map(Some),
        Err(Error::AucUndefined {
            precision,
            recall,
            f1,
        }) => [None, Some(*f1), Some(*precision), Some(*recall)],
        Err(_) => [None; 4],
    }
}

pub fn render_metrics(metrics: &Result<Metrics>) -> String {
    render_values(metric_values(metrics))
}

fn render_values(values: [Option<f64>; 4]) -> String {
    let mut s = String::new();
    for (name, v) in METRIC_NAMES.iter().zip(values) {
        match v {
            Some(v) => writeln!(s, "  {name:<10} {v:.6}"),
            None => writeln!(s, "  {name:<10} undefined"),
        }
        .expect("writing to a String");
    }
    s
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub memory_size: usize,
    pub ablation: Ablation,
    pub seed: u64,
    pub learning_rate: f64,
    pub concepts: usize,
    pub ontology_hash: String,
    pub users: usize,
    pub positives: usize,
    pub train_users: usize,
    pub validation_users: usize,
    pub test_users: usize,
    pub weight_pos: f64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// AUC, F1, precision, recall; `None` where undefined.
    pub validation: [Option<f64>; 4],
    pub validation_note: Option<String>,
}

impl TrainReport {
    pub fn new(
        config: &TrainConfig,
        ontology: &Ontology,
        traces: &[UserTrace],
        outcome: &TrainOutcome,
        validation: Result<Metrics>,
    ) -> Self {
        let note = validation.as_ref().err().map(|e| e.to_string());
        TrainReport {
            memory_size: config.memory_size,
            ablation: config.ablation,
            seed: config.seed,
            learning_rate: config.learning_rate,
            concepts: ontology.len(),
            ontology_hash: ontology.content_hash(),
            users: traces.len(),
            positives: traces.iter().filter(|t| t.label() == Some(true)).count(),
            train_users: outcome.split.train.len(),
            validation_users: outcome.split.val.len(),
            test_users: outcome.split.test.len(),
            weight_pos: outcome.weight_pos,
            epochs_run: outcome.history.len(),
            best_epoch: outcome.best_epoch,
            history: outcome.history.clone(),
            validation: metric_values(&validation),
            validation_note: note,
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "memory size: {}", self.memory_size);
        let _ = writeln!(s, "model: {}", self.ablation.label());
        let _ = writeln!(s, "seed: {}", self.seed);
        let _ = writeln!(s, "learning rate: {}", self.learning_rate);
        let _ = writeln!(
            s,
            "ontology: {} concepts, sha256 {}",
            self.concepts, self.ontology_hash
        );
        let _ = writeln!(
            s,
            "users: {} ({} positive); split train {} / validation {} / test {}",
            self.users, self.positives, self.train_users, self.validation_users, self.test_users
        );
        let _ = writeln!(s, "positive-class weight: {:.6}", self.weight_pos);
        let _ = writeln!(
            s,
            "epochs run: {}, best epoch: {}",
            self.epochs_run, self.best_epoch
        );
        if let Some(last) = self.history.last() {
            let _ = writeln!(s, "final training loss: {:.6}", last.train_loss);
        }
        let _ = writeln!(s, "validation metrics:");
        s.push_str(&render_values(self.validation));
        if let Some(note) = &self.validation_note {
            let _ = writeln!(s, "  note: {note}");
        }
        s
    }
}
