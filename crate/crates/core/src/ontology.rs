//! Frequency-annotated depression ontology.
//!
//! Each concept carries the share of clinically diagnosed patients who
//! present it (`freq`). Concept order is the file order and defines the
//! input layout of the ontology-attention network, so it is preserved
//! exactly through load and save.
//!
//! File format is JSON Lines, one concept per line:
//!
//! ```text
//! {"term": "dejected mood", "class": "symptom", "freq": 0.9, "synonyms": ["low mood"]}
//! ```

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{cosine, EmbeddingProvider};
use crate::error::{read_input, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OntologyClass {
    Symptom,
    LifeEvent,
    Treatment,
}

impl OntologyClass {
    pub fn as_str(self) -> &'static str {
        match self {
            OntologyClass::Symptom => "symptom",
            OntologyClass::LifeEvent => "life_event",
            OntologyClass::Treatment => "treatment",
        }
    }
}

impl fmt::Display for OntologyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub term: String,
    pub class: OntologyClass,
    pub freq: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub synonyms: Vec<String>,
    #[serde(skip)]
    embedding: Option<Vec<f64>>,
}

impl Concept {
    pub fn new(term: impl Into<String>, class: OntologyClass, freq: f64) -> Self {
        Concept {
            term: term.into(),
            class,
            freq,
            synonyms: Vec::new(),
            embedding: None,
        }
    }

    pub fn with_synonyms<S: Into<String>>(mut self, synonyms: impl IntoIterator<Item = S>) -> Self {
        self.synonyms = synonyms.into_iter().map(Into::into).collect();
        self
    }

    pub fn embedding(&self) -> Option<&[f64]> {
        self.embedding.as_deref()
    }

    /// Term followed by its synonyms.
    pub fn surface_forms(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.term.as_str()).chain(self.synonyms.iter().map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ontology {
    concepts: Vec<Concept>,
}

impl Ontology {
    pub fn new(concepts: Vec<Concept>) -> Result<Self> {
        if concepts.is_empty() {
            return Err(Error::Validation("ontology must contain ≥1 concept".into()));
        }
        let mut seen = HashSet::new();
        for c in &concepts {
            validate_concept(c)?;
            if !seen.insert(c.term.trim().to_lowercase()) {
                return Err(Error::Validation(format!("duplicate term {:?}", c.term)));
            }
        }
        Ok(Ontology { concepts })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = read_input("ontology", path)?;
        Self::parse(&body, path)
    }

    pub fn parse(body: &str, path: &Path) -> Result<Self> {
        let mut concepts = Vec::new();
        let mut seen = HashSet::new();
        for (idx, line) in body.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let concept: Concept = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: e.to_string(),
            })?;
            validate_concept(&concept)
                .map_err(|e| Error::Validation(format!("line {}: {e}", idx + 1)))?;
            if !seen.insert(concept.term.trim().to_lowercase()) {
                return Err(Error::Validation(format!(
                    "line {}: duplicate term {:?}",
                    idx + 1,
                    concept.term
                )));
            }
            concepts.push(concept);
        }
        Self::new(concepts)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for c in &self.concepts {
            out.push_str(&serde_json::to_string(c).expect("concept serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    /// Zero-based canonical index.
    pub fn concept(&self, index: usize) -> Result<&Concept> {
        self.concepts
            .get(index)
            .ok_or_else(|| Error::IndexOutOfRange {
                index,
                valid: format!("0..{}", self.concepts.len()),
            })
    }

    pub fn freq_of(&self, index: usize) -> Result<f64> {
        Ok(self.concept(index)?.freq)
    }

    pub fn find(&self, term: &str) -> Option<usize> {
        let k = term.trim().to_lowercase();
        self.concepts
            .iter()
            .position(|c| c.term.trim().to_lowercase() == k)
    }

    /// Embeds every concept term with `provider`.
    pub fn attach_embeddings(&mut self, provider: &EmbeddingProvider) -> Result<()> {
        for c in &mut self.concepts {
            c.embedding = Some(provider.embed(&c.term)?);
        }
        Ok(())
    }

    pub fn has_embeddings(&self) -> bool {
        self.concepts.iter().all(|c| c.embedding.is_some())
    }

    /// SHA-256 over the canonical content (terms, classes, exact frequency
    /// bits, synonyms), in order. Embeddings are excluded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.concepts {
            h.update(c.term.as_bytes());
            h.update([0x1f]);
            h.update(c.class.as_str().as_bytes());
            h.update([0x1f]);
            h.update(c.freq.to_bits().to_le_bytes());
            for s in &c.synonyms {
                h.update([0x1f]);
                h.update(s.as_bytes());
            }
            h.update([0x1e]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn validate_concept(c: &Concept) -> Result<()> {
    if c.term.trim().is_empty() {
        return Err(Error::Validation("concept with empty term".into()));
    }
    if !(0.0..=1.0).contains(&c.freq) {
        return Err(Error::Validation(format!(
            "concept {:?}: freq {} outside [0, 1]",
            c.term, c.freq
        )));
    }
    Ok(())
}

/// Decides whether a concept covers a diagnosis-scale term.
pub trait SynonymMatcher {
    fn matches(&self, concept: &Concept, term: &str) -> Result<bool>;
}

/// Case-insensitive equality against the concept term or any synonym.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactMatcher;

impl SynonymMatcher for ExactMatcher {
    fn matches(&self, concept: &Concept, term: &str) -> Result<bool> {
        let t = term.trim().to_lowercase();
        Ok(concept
            .surface_forms()
            .any(|s| s.trim().to_lowercase() == t))
    }
}

/// Cosine similarity of any surface form to the scale term at or above `threshold`.
#[derive(Debug, Clone)]
pub struct EmbeddingMatcher<'a> {
    pub provider: &'a EmbeddingProvider,
    pub threshold: f64,
}

pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.8;

impl SynonymMatcher for EmbeddingMatcher<'_> {
    fn matches(&self, concept: &Concept, term: &str) -> Result<bool> {
        let target = self.provider.embed(term)?;
        for form in concept.surface_forms() {
            let v = self.provider.embed(form)?;
            if cosine(&v, &target)? >= self.threshold {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

/// Fraction of scale terms matched by at least one concept. Each scale term
/// contributes at most 1 no matter how many concepts match it.
pub fn coverage(
    ontology: &Ontology,
    scale_terms: &[String],
    matcher: &dyn SynonymMatcher,
) -> Result<f64> {
    if scale_terms.is_empty() {
        return Err(Error::Validation("scale must contain ≥1 term".into()));
    }
    let mut covered = 0usize;
    for t in scale_terms {
        for c in ontology.concepts() {
            if matcher.matches(c, t)? {
                covered += 1;
                break;
            }
        }
    }
    Ok(covered as f64 / scale_terms.len() as f64)
}

/// One scale term per non-empty line.
pub fn load_scale_terms(path: &Path) -> Result<Vec<String>> {
    let body = read_input("scale", path)?;
    Ok(body
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}
