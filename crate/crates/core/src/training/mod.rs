//! Loss, optimizer, training loop with early stopping, evaluation and the
//! ablation protocol.

mod ablation;
pub mod metrics;

use std::borrow::Cow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::model::{
    encode, Ablation, EncodedTrace, Model, ModelConfig, DEFAULT_HIDDEN_DIM, DEFAULT_TIME_DIM,
};
use crate::numerics::{self, NumericsError};
use crate::ontology::Ontology;
use crate::trace::{UserTrace, DEFAULT_MEMORY_SIZE};

pub use ablation::{run_ablation_set, run_ablations, AblationRow, AblationTable, ABLATIONS};
pub use metrics::{auc, compute_metrics, Metrics, METRIC_NAMES};

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const DEFAULT_PATIENCE: usize = 10;

/// Weighted binary cross-entropy on a probability; the probability is
/// clamped to `[1e-12, 1 − 1e-12]`.
pub fn loss(y_hat: f64, y: bool, weight_pos: f64) -> f64 {
    numerics::weighted_bce(y_hat, if y { 1.0 } else { 0.0 }, weight_pos)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub memory_size: usize,
    pub hidden_dim: usize,
    pub time_dim: usize,
    pub ablation: Ablation,
    /// Loss weight of the positive class; `None` means `N_neg / N_pos` of the
    /// training split.
    pub weight_pos: Option<f64>,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: DEFAULT_LEARNING_RATE,
            epochs: 100,
            batch_size: 16,
            seed: 0,
            memory_size: DEFAULT_MEMORY_SIZE,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            time_dim: DEFAULT_TIME_DIM,
            ablation: Ablation::FULL,
            weight_pos: None,
            split: [0.6, 0.2, 0.2],
            patience: DEFAULT_PATIENCE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // zero is allowed: it is the "parameters stay put" control run
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.memory_size == 0 {
            return Err(Error::Config("memory size must be at least 1".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.hidden_dim == 0 || self.time_dim == 0 {
            return Err(Error::Config(
                "epochs, batch size, hidden and time dimensions must be positive".into(),
            ));
        }
        if self.split.iter().any(|f| !(0.0..=1.0).contains(f))
            || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "split fractions must lie in [0,1] and sum to 1, got {:?}",
                self.split
            )));
        }
        if let Some(w) = self.weight_pos {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Config(format!(
                    "positive-class weight must be positive, got {w}"
                )));
            }
        }
        Ok(())
    }

    pub fn model_config(&self, embedding_dim: usize, ontology: &Ontology) -> ModelConfig {
        ModelConfig {
            hidden_dim: self.hidden_dim,
            time_dim: self.time_dim,
            memory_size: self.memory_size,
            ablation: self.ablation,
            ..ModelConfig::new(embedding_dim, ontology)
        }
    }
}

/// Index sets into the data passed to [`train`], each in ascending order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles each class separately and cuts it by the fractions, so every
/// part keeps the class ratio up to rounding.
pub fn stratified_split(labels: &[bool], fractions: [f64; 3], seed: u64) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_train = ((n as f64 * fractions[0]).round() as usize).min(n);
        let n_val = ((n as f64 * fractions[1]).round() as usize).min(n - n_train);
        split.train.extend(&idx[..n_train]);
        split.val.extend(&idx[n_train..n_train + n_val]);
        split.test.extend(&idx[n_train + n_val..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    split
}

/// Bias-corrected adaptive moment estimation.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut [f64]>,
        grads: &[Vec<f64>],
    ) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (k, p) in params.into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean weighted loss over the training split, accumulated during the epoch.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were kept; 0 means the initialization.
    pub best_epoch: usize,
    pub split: Split,
    pub weight_pos: f64,
}

/// The ontology with concept embeddings attached, borrowing when they are
/// already present.
pub fn with_embeddings<'a>(
    ontology: &'a Ontology,
    provider: &EmbeddingProvider,
) -> Result<Cow<'a, Ontology>> {
    if ontology.has_embeddings() {
        return Ok(Cow::Borrowed(ontology));
    }
    let mut o = ontology.clone();
    o.attach_embeddings(provider)?;
    Ok(Cow::Owned(o))
}

/// Windows (and for the entity ablation, re-segments) and encodes every
/// trace. Order is preserved.
pub fn encode_all(
    traces: &[UserTrace],
    config: &ModelConfig,
    ontology: &Ontology,
    provider: &EmbeddingProvider,
) -> Result<Vec<EncodedTrace>> {
    let ontology = with_embeddings(ontology, provider)?;
    traces
        .par_iter()
        .map(|t| encode(&crate::model::prepare(t, config, provider)?, &ontology))
        .collect()
}

pub fn predict(model: &Model, inputs: &[EncodedTrace]) -> Result<Vec<f64>> {
    inputs
        .par_iter()
        .map(|x| model.forward_encoded(x).map(|r| r.probability))
        .collect()
}

fn labels_of(inputs: &[EncodedTrace]) -> Result<Vec<bool>> {
    inputs
        .iter()
        .map(|x| {
            x.label
                .ok_or_else(|| Error::Validation(format!("user {:?} is unlabeled", x.user_id)))
        })
        .collect()
}

fn divergence(epoch: usize, e: Error) -> Error {
    match e {
        Error::Numerics(NumericsError::NonFinite { op }) => Error::Diverged {
            epoch,
            detail: format!("non-finite value produced by {op}"),
        },
        other => other,
    }
}

/// Trains on the training part of a stratified split of `data` and keeps the
/// parameters of the epoch with the best validation AUC. When the
/// validation part cannot rank (empty or one class) the lowest training
/// loss selects instead.
pub fn train(
    data: &[UserTrace],
    ontology: &Ontology,
    provider: &EmbeddingProvider,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let model_config = config.model_config(provider.dim(), ontology);
    let encoded = encode_all(data, &model_config, ontology, provider)?;
    let labels = labels_of(&encoded)?;
    let split = stratified_split(&labels, config.split, config.seed);
    train_encoded(&encoded, &labels, split, model_config, config)
}

pub fn train_encoded(
    encoded: &[EncodedTrace],
    labels: &[bool],
    split: Split,
    model_config: ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let n_pos = split.train.iter().filter(|&&i| labels[i]).count();
    let n_neg = split.train.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClassTraining);
    }
    let weight_pos = config.weight_pos.unwrap_or(n_neg as f64 / n_pos as f64);

    let mut model = Model::new(model_config, config.seed)?;
    let sizes: Vec<usize> = model.params.tensors().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(config.learning_rate, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));

    let val: Vec<EncodedTrace> = split.val.iter().map(|&i| encoded[i].clone()).collect();
    let val_labels: Vec<bool> = split.val.iter().map(|&i| labels[i]).collect();

    let mut order = split.train.clone();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best = (model.params.clone(), 0usize, f64::NEG_INFINITY);
    let mut since_best = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut acc: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            for &i in batch {
                let (l, _, g) = model
                    .loss_and_grad(&encoded[i], weight_pos)
                    .map_err(|e| divergence(epoch, e))?;
                if !l.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        detail: format!("loss {l} on user {:?}", encoded[i].user_id),
                    });
                }
                total += l;
                for (a, gk) in acc.iter_mut().zip(&g) {
                    for (x, y) in a.iter_mut().zip(gk) {
                        *x += y;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            acc.iter_mut().flatten().for_each(|x| *x *= scale);
            adam.step(
                model.params.tensors_mut().into_iter().map(|t| t.data_mut()),
                &acc,
            );
        }
        let train_loss = total / order.len() as f64;

        let (val_loss, val_auc) = if val.is_empty() {
            (None, None)
        } else {
            let p = predict(&model, &val).map_err(|e| divergence(epoch, e))?;
            let vl = p
                .iter()
                .zip(&val_labels)
                .map(|(&p, &y)| loss(p, y, weight_pos))
                .sum::<f64>()
                / p.len() as f64;
            (Some(vl), auc(&p, &val_labels))
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_auc,
        });

        let score = val_auc.unwrap_or(-train_loss);
        if score > best.2 {
            best = (model.params.clone(), epoch, score);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    model.params = best.0;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch: best.1,
        split,
        weight_pos,
    })
}

/// Scores labeled traces. A single-class set yields
/// [`Error::AucUndefined`], which still carries precision, recall and F1.
pub fn evaluate(
    model: &Model,
    data: &[UserTrace],
    ontology: &Ontology,
    provider: &EmbeddingProvider,
) -> Result<Metrics> {
    check_ontology(model, ontology)?;
    let encoded = encode_all(data, &model.config, ontology, provider)?;
    evaluate_encoded(model, &encoded)
}

pub fn evaluate_encoded(model: &Model, inputs: &[EncodedTrace]) -> Result<Metrics> {
    let labels = labels_of(inputs)?;
    let scores = predict(model, inputs)?;
    compute_metrics(&scores, &labels)
}

/// A checkpoint only applies to the ontology it was trained with.
pub fn check_ontology(model: &Model, ontology: &Ontology) -> Result<()> {
    let hash = ontology.content_hash();
    if hash != model.config.ontology_hash {
        return Err(Error::OntologyHashMismatch {
            checkpoint: model.config.ontology_hash.clone(),
            ontology: hash,
        });
    }
    if ontology.len() != model.config.concepts {
        return Err(Error::ConceptCountMismatch {
            expected: model.config.concepts,
            got: ontology.len(),
        });
    }
    Ok(())
}
