//! Knowledge-aware attention sequence classifier for depression-risk
//! detection from time-stamped diagnosis-related entity traces.

pub mod cli;
pub mod datagen;
pub mod embedding;
pub mod error;
pub mod model;
pub mod numerics;
pub mod ontology;
pub mod trace;
pub mod training;

pub use error::{Error, Result};
