//! JSON checkpoints: config plus every named tensor. Floats are written in
//! shortest round-trip form and parsed back exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelParams, PARAM_NAMES};
use crate::error::{read_input, Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_FORMAT: &str = "kadet-checkpoint/1";

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    config: ModelConfig,
    tensors: Vec<NamedTensor>,
}

impl Model {
    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.config.clone(),
            tensors: PARAM_NAMES
                .iter()
                .zip(self.params.tensors())
                .map(|(name, t)| NamedTensor {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(body: &str) -> Result<Self> {
        let file: CheckpointFile =
            serde_json::from_str(body).map_err(|e| Error::Serde(format!("checkpoint: {e}")))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Validation(format!(
                "unsupported checkpoint format {:?}",
                file.format
            )));
        }
        file.config.validate()?;
        let mut tensors = Vec::with_capacity(file.tensors.len());
        for (nt, expected) in file.tensors.into_iter().zip(PARAM_NAMES) {
            if nt.name != expected {
                return Err(Error::Validation(format!(
                    "checkpoint tensor {:?} where {expected:?} was expected",
                    nt.name
                )));
            }
            tensors.push(Tensor::new(nt.shape, nt.values)?);
        }
        let params = ModelParams::from_tensors(&file.config, tensors)?;
        Ok(Model {
            config: file.config,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = read_input("checkpoint", path)?;
        Self::from_json(&body)
    }
}
