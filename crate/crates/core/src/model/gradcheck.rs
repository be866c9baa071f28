//! Central-difference check of the complete weighted loss against the tape
//! gradient, on a random ontology, trace and parameter set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_graph, encode, Ablation, EncodedTrace, ModelConfig, ModelParams, ParamVars};
use crate::embedding::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::numerics::{grad_compare, GradComparison, NumericsError, Tensor};
use crate::ontology::{Concept, Ontology, OntologyClass};
use crate::trace::{EntityRecord, UserTrace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSetup {
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub time_dim: usize,
    pub concepts: usize,
    pub entities: usize,
    pub eps: f64,
    pub ablation: Ablation,
}

impl Default for GradCheckSetup {
    fn default() -> Self {
        GradCheckSetup {
            embedding_dim: 8,
            hidden_dim: 8,
            time_dim: 4,
            concepts: 5,
            entities: 5,
            eps: 1e-5,
            ablation: Ablation::FULL,
        }
    }
}

/// A labeled problem instance drawn from `seed`.
#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub input: EncodedTrace,
    pub weight_pos: f64,
}

pub fn random_case(setup: &GradCheckSetup, seed: u64) -> Result<GradCheckCase> {
    if setup.entities == 0 || setup.concepts == 0 {
        return Err(Error::Config(
            "need at least one entity and one concept".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let provider = EmbeddingProvider::hashed(setup.embedding_dim)?;
    let classes = [
        OntologyClass::Symptom,
        OntologyClass::LifeEvent,
        OntologyClass::Treatment,
    ];
    let concepts = (0..setup.concepts)
        .map(|k| {
            Concept::new(
                format!("concept {seed}-{k}"),
                classes[k % 3],
                rng.random_range(0.05..0.95),
            )
        })
        .collect();
    let mut ontology = Ontology::new(concepts)?;
    ontology.attach_embeddings(&provider)?;

    let t_decision = 1_000_000_000i64;
    let entities = (0..setup.entities)
        .map(|i| {
            let text = if rng.random_bool(0.5) {
                ontology.concepts()[rng.random_range(0..setup.concepts)]
                    .term
                    .clone()
            } else {
                format!("word {seed}-{i}")
            };
            Ok(EntityRecord {
                embedding: provider.embed(&text)?,
                text,
                timestamp: t_decision - rng.random_range(0..400 * 86_400),
                first_person: rng.random_bool(0.5),
                sentence: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let trace = UserTrace::new(
        format!("case{seed}"),
        entities,
        Some(t_decision),
        Some(rng.random_bool(0.5)),
    )?;

    let config = ModelConfig {
        hidden_dim: setup.hidden_dim,
        time_dim: setup.time_dim,
        ablation: setup.ablation,
        ..ModelConfig::new(setup.embedding_dim, &ontology)
    };
    config.validate()?;
    // move away from the initializer so no unit sits at an exact zero
    let mut params = ModelParams::init(&config, seed);
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    Ok(GradCheckCase {
        input: encode(&trace, &ontology)?,
        config,
        params,
        weight_pos: rng.random_range(1.0..6.0),
    })
}

/// Tape and central-difference gradients of the weighted loss for every
/// parameter entry.
pub fn compare_case(case: &GradCheckCase, eps: f64) -> Result<GradComparison> {
    let target = if case.input.label == Some(true) {
        1.0
    } else {
        0.0
    };
    let tensors: Vec<Tensor> = case.params.tensors().into_iter().cloned().collect();
    let cmp = grad_compare(
        |tape, vars| {
            let pv = ParamVars::from_vars(vars);
            let g = build_graph(tape, &pv, &case.config, &case.input).map_err(|e| match e {
                Error::Numerics(n) => n,
                other => NumericsError::InvalidArgument(other.to_string()),
            })?;
            tape.weighted_bce(g.prob, target, case.weight_pos)
        },
        &tensors,
        eps,
    )?;
    Ok(cmp)
}

/// Maximum relative error over every parameter entry.
pub fn grad_check_full_loss(setup: &GradCheckSetup, seed: u64) -> Result<f64> {
    Ok(compare_case(&random_case(setup, seed)?, setup.eps)?.max_rel_error())
}
