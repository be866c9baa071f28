//! The knowledge-aware attention network.
//!
//! Entities are encoded by an LSTM. Two attention channels weigh them: a
//! temporal one (hidden state plus a sinusoidal recency embedding, scored
//! against the entity input through a learned bilinear form) and an
//! ontology one (similarity × population frequency against every concept,
//! scored by a small network). A user-level gate computed from the final
//! hidden state blends the two channels; the blended weights pool the hidden
//! states and a logistic layer predicts the risk.

mod checkpoint;
pub mod gradcheck;
pub mod layers;

use std::num::NonZeroUsize;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::ontology::Ontology;
use crate::trace::{UserTrace, DEFAULT_MEMORY_SIZE};

pub use checkpoint::CHECKPOINT_FORMAT;
pub use layers::RECENCY_UNIT_SECS;

pub const DEFAULT_HIDDEN_DIM: usize = 32;
pub const DEFAULT_TIME_DIM: usize = 8;

/// Knowledge sources switched off for ablation runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Temporal attention replaced by uniform weights; only the ontology channel remains.
    pub no_temporal: bool,
    /// Ontology attention replaced by uniform weights.
    pub no_ontology: bool,
    /// Word tokens of the raw sentences fed instead of extracted entities.
    pub no_entity: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        no_temporal: false,
        no_ontology: false,
        no_entity: false,
    };

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.no_temporal {
            parts.push("no_temporal");
        }
        if self.no_ontology {
            parts.push("no_ontology");
        }
        if self.no_entity {
            parts.push("no_entity");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub time_dim: usize,
    /// Number of ontology concepts; frozen at construction.
    pub concepts: usize,
    pub memory_size: usize,
    pub ontology_hash: String,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn new(embedding_dim: usize, ontology: &Ontology) -> Self {
        ModelConfig {
            embedding_dim,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            time_dim: DEFAULT_TIME_DIM,
            concepts: ontology.len(),
            memory_size: DEFAULT_MEMORY_SIZE,
            ontology_hash: ontology.content_hash(),
            ablation: Ablation::FULL,
        }
    }

    /// Entity embedding plus the first-person flag.
    pub fn input_dim(&self) -> usize {
        self.embedding_dim + 1
    }

    pub fn ontology_hidden(&self) -> usize {
        (self.concepts / 2).max(8)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("embedding_dim", self.embedding_dim),
            ("hidden_dim", self.hidden_dim),
            ("time_dim", self.time_dim),
            ("concepts", self.concepts),
            ("memory_size", self.memory_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn memory(&self) -> NonZeroUsize {
        NonZeroUsize::new(self.memory_size).unwrap_or(NonZeroUsize::MIN)
    }
}

/// Every learnable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `[4h, d_x + h]`, gate blocks (input, forget, candidate, output).
    pub lstm_w: Tensor,
    pub lstm_b: Tensor,
    /// Angular frequencies of the recency embedding, per day.
    pub time_freq: Tensor,
    pub time_phase: Tensor,
    /// `[d_x, h + 2 n_d]` bilinear temporal-attention form.
    pub attn_proj: Tensor,
    /// `[J, hidden]`
    pub ont_w1: Tensor,
    pub ont_b1: Tensor,
    pub ont_w2: Tensor,
    /// `[2, h]`
    pub fusion_w: Tensor,
    pub fusion_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

pub const PARAM_NAMES: [&str; 12] = [
    "lstm.weight",
    "lstm.bias",
    "temporal.freq",
    "temporal.phase",
    "attention.proj",
    "ontology.w1",
    "ontology.b1",
    "ontology.w2",
    "fusion.weight",
    "fusion.bias",
    "output.weight",
    "output.bias",
];

impl ModelParams {
    pub fn shapes(config: &ModelConfig) -> [Vec<usize>; 12] {
        let (dx, h, nd, j, oh) = (
            config.input_dim(),
            config.hidden_dim,
            config.time_dim,
            config.concepts,
            config.ontology_hidden(),
        );
        [
            vec![4 * h, dx + h],
            vec![4 * h],
            vec![nd],
            vec![nd],
            vec![dx, h + 2 * nd],
            vec![j, oh],
            vec![oh],
            vec![oh],
            vec![2, h],
            vec![2],
            vec![h],
            vec![1],
        ]
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        let t = Self::shapes(config).map(|s| Tensor::zeros(&s));
        Self::from_array(t)
    }

    /// Glorot-uniform weights, zero biases except a forget-gate bias of 1,
    /// and a geometric frequency ladder `10000^{-k/n_d}` with zero phase.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(config);
        let h = config.hidden_dim;
        glorot(&mut rng, &mut p.lstm_w, 4 * h, config.input_dim() + h);
        p.lstm_b.data_mut()[h..2 * h].fill(1.0);
        let nd = config.time_dim;
        for (k, w) in p.time_freq.data_mut().iter_mut().enumerate() {
            *w = 1.0 / 10_000f64.powf(k as f64 / nd as f64);
        }
        glorot(&mut rng, &mut p.attn_proj, config.input_dim(), h + 2 * nd);
        glorot(
            &mut rng,
            &mut p.ont_w1,
            config.concepts,
            config.ontology_hidden(),
        );
        glorot(&mut rng, &mut p.ont_w2, config.ontology_hidden(), 1);
        glorot(&mut rng, &mut p.fusion_w, h, 2);
        glorot(&mut rng, &mut p.out_w, h, 1);
        p
    }

    fn from_array(t: [Tensor; 12]) -> Self {
        let [lstm_w, lstm_b, time_freq, time_phase, attn_proj, ont_w1, ont_b1, ont_w2, fusion_w, fusion_b, out_w, out_b] =
            t;
        ModelParams {
            lstm_w,
            lstm_b,
            time_freq,
            time_phase,
            attn_proj,
            ont_w1,
            ont_b1,
            ont_w2,
            fusion_w,
            fusion_b,
            out_w,
            out_b,
        }
    }

    pub fn into_array(self) -> [Tensor; 12] {
        [
            self.lstm_w,
            self.lstm_b,
            self.time_freq,
            self.time_phase,
            self.attn_proj,
            self.ont_w1,
            self.ont_b1,
            self.ont_w2,
            self.fusion_w,
            self.fusion_b,
            self.out_w,
            self.out_b,
        ]
    }

    /// Tensors in [`PARAM_NAMES`] order.
    pub fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.lstm_w,
            &self.lstm_b,
            &self.time_freq,
            &self.time_phase,
            &self.attn_proj,
            &self.ont_w1,
            &self.ont_b1,
            &self.ont_w2,
            &self.fusion_w,
            &self.fusion_b,
            &self.out_w,
            &self.out_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.lstm_w,
            &mut self.lstm_b,
            &mut self.time_freq,
            &mut self.time_phase,
            &mut self.attn_proj,
            &mut self.ont_w1,
            &mut self.ont_b1,
            &mut self.ont_w2,
            &mut self.fusion_w,
            &mut self.fusion_b,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }

    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let shapes = Self::shapes(config);
        if tensors.len() != shapes.len() {
            return Err(Error::Validation(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((t, s), name) in tensors.iter().zip(&shapes).zip(PARAM_NAMES) {
            if t.shape() != s.as_slice() {
                return Err(Error::Validation(format!(
                    "{name}: shape {:?} does not match config {s:?}",
                    t.shape()
                )));
            }
        }
        let arr: [Tensor; 12] = tensors.try_into().expect("length checked");
        Ok(Self::from_array(arr))
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

fn glorot(rng: &mut ChaCha8Rng, t: &mut Tensor, fan_out: usize, fan_in: usize) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in t.data_mut() {
        *v = rng.random_range(-limit..limit);
    }
}

/// Parameters registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub lstm_w: Var,
    pub lstm_b: Var,
    pub time_freq: Var,
    pub time_phase: Var,
    pub attn_proj: Var,
    pub ont_w1: Var,
    pub ont_b1: Var,
    pub ont_w2: Var,
    pub fusion_w: Var,
    pub fusion_b: Var,
    pub out_w: Var,
    pub out_b: Var,
}

impl ParamVars {
    /// Leaves when `trainable`, constants otherwise.
    pub fn register(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Self {
        let v = params.tensors().map(|t| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        });
        Self::from_vars(&v)
    }

    pub fn from_vars(v: &[Var]) -> Self {
        ParamVars {
            lstm_w: v[0],
            lstm_b: v[1],
            time_freq: v[2],
            time_phase: v[3],
            attn_proj: v[4],
            ont_w1: v[5],
            ont_b1: v[6],
            ont_w2: v[7],
            fusion_w: v[8],
            fusion_b: v[9],
            out_w: v[10],
            out_b: v[11],
        }
    }

    pub fn vars(&self) -> [Var; 12] {
        [
            self.lstm_w,
            self.lstm_b,
            self.time_freq,
            self.time_phase,
            self.attn_proj,
            self.ont_w1,
            self.ont_b1,
            self.ont_w2,
            self.fusion_w,
            self.fusion_b,
            self.out_w,
            self.out_b,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityInfo {
    pub text: String,
    pub timestamp: i64,
    pub recency_secs: i64,
}

/// Model-ready numeric form of one trace.
#[derive(Debug, Clone)]
pub struct EncodedTrace {
    pub user_id: String,
    pub label: Option<bool>,
    /// `[x̃_i ; first_person]` per entity.
    pub inputs: Vec<Tensor>,
    /// Recency in days.
    pub recency: Vec<f64>,
    /// `[M, J]` similarity × frequency.
    pub relevance: Tensor,
    pub entities: Vec<EntityInfo>,
}

impl EncodedTrace {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Builds model inputs for an already windowed trace. The ontology must
/// carry concept embeddings.
pub fn encode(trace: &UserTrace, ontology: &Ontology) -> Result<EncodedTrace> {
    if trace.is_empty() {
        return Err(Error::Validation(format!(
            "user {:?} has no entities to encode",
            trace.user_id()
        )));
    }
    let j = ontology.len();
    let mut inputs = Vec::with_capacity(trace.len());
    let mut relevance = Vec::with_capacity(trace.len() * j);
    let mut entities = Vec::with_capacity(trace.len());
    let recencies = trace.recencies();
    for (e, &r) in trace.entities().iter().zip(&recencies) {
        let mut x = e.embedding.clone();
        x.push(if e.first_person { 1.0 } else { 0.0 });
        inputs.push(Tensor::new(vec![x.len()], x)?);
        relevance.extend(layers::ontology_relevance(&e.embedding, ontology)?);
        entities.push(EntityInfo {
            text: e.text.clone(),
            timestamp: e.timestamp,
            recency_secs: r,
        });
    }
    Ok(EncodedTrace {
        user_id: trace.user_id().to_string(),
        label: trace.label(),
        inputs,
        recency: recencies
            .iter()
            .map(|&r| r as f64 / RECENCY_UNIT_SECS)
            .collect(),
        relevance: Tensor::matrix(trace.len(), j, relevance)?,
        entities,
    })
}

/// Output nodes of one forward graph.
#[derive(Debug, Clone, Copy)]
pub struct Graph {
    pub prob: Var,
    pub beta_temp: Var,
    pub beta_ont: Var,
    pub fusion: Var,
    pub weights: Var,
}

pub fn build_graph(
    tape: &mut Tape,
    pv: &ParamVars,
    config: &ModelConfig,
    input: &EncodedTrace,
) -> Result<Graph> {
    let m = input.len();
    if m == 0 {
        return Err(Error::Validation("empty entity sequence".into()));
    }
    let j = input.relevance.shape()[1];
    if j != config.concepts {
        return Err(Error::ConceptCountMismatch {
            expected: config.concepts,
            got: j,
        });
    }
    let xs: Vec<Var> = input
        .inputs
        .iter()
        .map(|x| {
            if x.len() != config.input_dim() {
                return Err(Error::DimensionMismatch {
                    expected: config.input_dim(),
                    got: x.len(),
                });
            }
            Ok(tape.constant(x.clone()))
        })
        .collect::<Result<_>>()?;
    let (hs, h_star) = layers::lstm_encode(tape, pv.lstm_w, pv.lstm_b, &xs, config.hidden_dim)?;

    let uniform = || Tensor::vector(vec![1.0 / m as f64; m]);
    let ablation = config.ablation;
    let beta_temp = if ablation.no_temporal {
        tape.constant(uniform())
    } else {
        let phis: Vec<Var> = input
            .recency
            .iter()
            .map(|&tau| layers::temporal_embed(tape, pv.time_freq, pv.time_phase, tau))
            .collect::<Result<_>>()?;
        layers::temporal_attention(tape, &xs, &hs, &phis, pv.attn_proj)?
    };
    let beta_ont = if ablation.no_ontology {
        tape.constant(uniform())
    } else {
        let rel = tape.constant(input.relevance.clone());
        layers::ontology_attention(tape, rel, pv.ont_w1, pv.ont_b1, pv.ont_w2)?
    };
    let fusion = if ablation.no_temporal {
        tape.constant(Tensor::vector(vec![0.0, 1.0]))
    } else {
        layers::fusion_weights(tape, h_star, pv.fusion_w, pv.fusion_b)?
    };
    let fused =
        layers::fuse_and_predict(tape, &hs, beta_temp, beta_ont, fusion, pv.out_w, pv.out_b)?;
    Ok(Graph {
        prob: fused.prob,
        beta_temp,
        beta_ont,
        fusion,
        weights: fused.weights,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityAttention {
    pub text: String,
    pub timestamp: i64,
    pub recency_secs: i64,
    pub temporal: f64,
    pub ontology: f64,
    pub fused: f64,
}

/// Per-entity attention and the user-level fusion pair behind one prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub user_id: String,
    pub probability: f64,
    /// `(ã₁, ã₂)`: weight of the temporal and the ontology channel.
    pub fusion: [f64; 2],
    pub entities: Vec<EntityAttention>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, seed);
        Ok(Model { config, params })
    }

    /// Applies the ablation input transform (raw tokens instead of entities)
    /// and the memory window.
    pub fn prepare(&self, trace: &UserTrace, provider: &EmbeddingProvider) -> Result<UserTrace> {
        prepare(trace, &self.config, provider)
    }

    pub fn forward_encoded(&self, input: &EncodedTrace) -> Result<AttentionReport> {
        let mut tape = Tape::new();
        let pv = ParamVars::register(&mut tape, &self.params, false);
        let g = build_graph(&mut tape, &pv, &self.config, input)?;
        let bt = tape.value(g.beta_temp).data();
        let bo = tape.value(g.beta_ont).data();
        let w = tape.value(g.weights).data();
        let f = tape.value(g.fusion).data();
        let entities = input
            .entities
            .iter()
            .enumerate()
            .map(|(i, e)| EntityAttention {
                text: e.text.clone(),
                timestamp: e.timestamp,
                recency_secs: e.recency_secs,
                temporal: bt[i],
                ontology: bo[i],
                fused: w[i],
            })
            .collect();
        Ok(AttentionReport {
            user_id: input.user_id.clone(),
            probability: tape.value(g.prob).item(),
            fusion: [f[0], f[1]],
            entities,
        })
    }

    /// Scores a trace that is already prepared (windowed, embedded).
    pub fn forward(
        &self,
        trace: &UserTrace,
        ontology: &Ontology,
    ) -> Result<(f64, AttentionReport)> {
        if ontology.len() != self.config.concepts {
            return Err(Error::ConceptCountMismatch {
                expected: self.config.concepts,
                got: ontology.len(),
            });
        }
        let report = self.forward_encoded(&encode(trace, ontology)?)?;
        Ok((report.probability, report))
    }

    /// Weighted cross-entropy of one labeled trace and its gradient with
    /// respect to every parameter tensor.
    pub fn loss_and_grad(
        &self,
        input: &EncodedTrace,
        weight_pos: f64,
    ) -> Result<(f64, f64, Vec<Vec<f64>>)> {
        let label = input
            .label
            .ok_or_else(|| Error::Validation(format!("user {:?} is unlabeled", input.user_id)))?;
        let mut tape = Tape::new();
        let pv = ParamVars::register(&mut tape, &self.params, true);
        let g = build_graph(&mut tape, &pv, &self.config, input)?;
        let target = if label { 1.0 } else { 0.0 };
        let loss = tape.weighted_bce(g.prob, target, weight_pos)?;
        let grads = tape.backward(loss)?;
        let per_tensor = pv
            .vars()
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, t)| grads.get_or_zeros(v, t.len()))
            .collect();
        Ok((
            tape.value(loss).item(),
            tape.value(g.prob).item(),
            per_tensor,
        ))
    }
}

pub fn prepare(
    trace: &UserTrace,
    config: &ModelConfig,
    provider: &EmbeddingProvider,
) -> Result<UserTrace> {
    let source = if config.ablation.no_entity {
        trace.raw_segments(provider)?
    } else {
        trace.clone()
    };
    Ok(source.window(config.memory()))
}
