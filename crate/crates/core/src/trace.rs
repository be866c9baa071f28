//! User traces: time-ordered diagnosis-related entity records.
//!
//! Trace files are JSON Lines with one user per line:
//!
//! ```text
//! {"user_id": "u1", "label": 1, "decision_time": 1700000000,
//!  "entities": [{"text": "hopeless", "timestamp": 1699990000, "first_person": 1,
//!                "sentence": "I feel hopeless"}]}
//! ```

use std::num::NonZeroUsize;
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingProvider;
use crate::error::{read_input, Error, Result};

/// Entities kept by default, newest first.
pub const DEFAULT_MEMORY_SIZE: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct EntityRecord {
    pub text: String,
    /// Seconds since the Unix epoch.
    pub timestamp: i64,
    pub first_person: bool,
    pub sentence: Option<String>,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserTrace {
    user_id: String,
    entities: Vec<EntityRecord>,
    decision_time: i64,
    label: Option<bool>,
}

impl UserTrace {
    /// Sorts entities by timestamp (stable) and validates them against the
    /// decision time, which defaults to the latest entity timestamp.
    pub fn new(
        user_id: impl Into<String>,
        mut entities: Vec<EntityRecord>,
        decision_time: Option<i64>,
        label: Option<bool>,
    ) -> Result<Self> {
        let user_id = user_id.into();
        if label.is_some() && entities.is_empty() {
            return Err(Error::Validation(format!(
                "labeled user {user_id:?} has no entities"
            )));
        }
        for e in &entities {
            if e.text.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "user {user_id:?}: empty entity text"
                )));
            }
        }
        entities.sort_by_key(|e| e.timestamp);
        let latest = entities.last().map(|e| e.timestamp);
        let decision_time = match (decision_time, latest) {
            (Some(t), Some(l)) if l > t => {
                return Err(Error::Validation(format!(
                    "user {user_id:?}: entity at {l} is after decision time {t}"
                )))
            }
            (Some(t), _) => t,
            (None, Some(l)) => l,
            (None, None) => 0,
        };
        Ok(UserTrace {
            user_id,
            entities,
            decision_time,
            label,
        })
    }

    pub fn user_id(&self) -> &str {
        &self.user_id
    }

    pub fn entities(&self) -> &[EntityRecord] {
        &self.entities
    }

    pub fn decision_time(&self) -> i64 {
        self.decision_time
    }

    pub fn label(&self) -> Option<bool> {
        self.label
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    /// `t_T - t_i` in seconds.
    pub fn recency(&self, i: usize) -> Result<i64> {
        let e = self.entities.get(i).ok_or_else(|| Error::IndexOutOfRange {
            index: i,
            valid: format!("0..{}", self.entities.len()),
        })?;
        Ok(self.decision_time - e.timestamp)
    }

    pub fn recencies(&self) -> Vec<i64> {
        self.entities
            .iter()
            .map(|e| self.decision_time - e.timestamp)
            .collect()
    }

    /// Keeps the `memory_size` most recent entities in their original order.
    pub fn window(&self, memory_size: NonZeroUsize) -> UserTrace {
        let m = memory_size.get();
        let skip = self.entities.len().saturating_sub(m);
        UserTrace {
            user_id: self.user_id.clone(),
            entities: self.entities[skip..].to_vec(),
            decision_time: self.decision_time,
            label: self.label,
        }
    }

    /// Replaces each entity by the word tokens of its source sentence (or of
    /// the entity text when no sentence was recorded). Used to feed raw text
    /// instead of extracted entities.
    pub fn raw_segments(&self, provider: &EmbeddingProvider) -> Result<UserTrace> {
        let mut entities = Vec::new();
        for e in &self.entities {
            let source = e.sentence.as_deref().unwrap_or(&e.text);
            for tok in tokenize(source) {
                entities.push(EntityRecord {
                    embedding: provider.embed(&tok)?,
                    text: tok,
                    timestamp: e.timestamp,
                    first_person: e.first_person,
                    sentence: None,
                });
            }
        }
        if entities.is_empty() {
            return Err(Error::Validation(format!(
                "user {:?} has no word tokens",
                self.user_id
            )));
        }
        Ok(UserTrace {
            user_id: self.user_id.clone(),
            entities,
            decision_time: self.decision_time,
            label: self.label,
        })
    }
}

fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntity {
    text: String,
    timestamp: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    first_person: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sentence: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrace {
    user_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    decision_time: Option<i64>,
    entities: Vec<RawEntity>,
}

fn bit(v: u8, what: &str) -> std::result::Result<bool, String> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(format!("{what} must be 0 or 1, got {other}")),
    }
}

fn convert(raw: RawTrace, provider: &EmbeddingProvider) -> std::result::Result<UserTrace, String> {
    let label = raw.label.map(|l| bit(l, "label")).transpose()?;
    let mut entities = Vec::with_capacity(raw.entities.len());
    for e in raw.entities {
        let first_person = match (e.first_person, e.sentence.as_deref()) {
            (Some(v), _) => bit(v, "first_person")?,
            (None, Some(sentence)) => {
                let span = find_span(sentence, &e.text)
                    .ok_or_else(|| format!("entity {:?} not found in its sentence", e.text))?;
                attribute_first_person(sentence, span).map_err(|err| err.to_string())?
            }
            // no context: assume the user's own report
            (None, None) => true,
        };
        let embedding = provider.embed(&e.text).map_err(|err| err.to_string())?;
        entities.push(EntityRecord {
            text: e.text,
            timestamp: e.timestamp,
            first_person,
            sentence: e.sentence,
            embedding,
        });
    }
    UserTrace::new(raw.user_id, entities, raw.decision_time, label).map_err(|err| err.to_string())
}

/// Parses, validates, sorts and embeds every trace in a JSONL file. Output
/// order equals file order.
pub fn ingest(path: &Path, provider: &EmbeddingProvider) -> Result<Vec<UserTrace>> {
    let body = read_input("traces", path)?;
    parse_traces(&body, path, provider)
}

pub fn parse_traces(
    body: &str,
    path: &Path,
    provider: &EmbeddingProvider,
) -> Result<Vec<UserTrace>> {
    let lines: Vec<(usize, &str)> = body
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .collect();
    lines
        .par_iter()
        .map(|&(idx, line)| {
            let raw: RawTrace = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: e.to_string(),
            })?;
            convert(raw, provider).map_err(|message| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message,
            })
        })
        .collect()
}

/// Renders traces in the JSONL format read by [`ingest`]. Embeddings are not
/// stored; they are recomputed from the text on ingest.
pub fn to_jsonl(traces: &[UserTrace]) -> String {
    let mut out = String::new();
    for t in traces {
        let raw = RawTrace {
            user_id: t.user_id.clone(),
            label: t.label.map(u8::from),
            decision_time: Some(t.decision_time),
            entities: t
                .entities
                .iter()
                .map(|e| RawEntity {
                    text: e.text.clone(),
                    timestamp: e.timestamp,
                    first_person: Some(u8::from(e.first_person)),
                    sentence: e.sentence.clone(),
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&raw).expect("trace serializes"));
        out.push('\n');
    }
    out
}

pub fn save_traces(traces: &[UserTrace], path: &Path) -> Result<()> {
    std::fs::write(path, to_jsonl(traces)).map_err(|e| Error::io(path, e))
}

fn find_span(sentence: &str, text: &str) -> Option<Range<usize>> {
    let lower = sentence.to_lowercase();
    let needle = text.trim().to_lowercase();
    if lower.len() != sentence.len() || needle.is_empty() {
        // lowercasing changed byte offsets; fall back to exact search
        return sentence.find(text.trim()).map(|s| s..s + text.trim().len());
    }
    lower.find(&needle).map(|s| s..s + needle.len())
}

const FIRST_PERSON: &[&str] = &[
    "i",
    "me",
    "we",
    "us",
    "myself",
    "ourselves",
    "i'm",
    "im",
    "i've",
    "ive",
    "i'd",
    "i'll",
];
const OTHER_PERSON: &[&str] = &[
    "he",
    "she",
    "they",
    "you",
    "him",
    "them",
    "it",
    "someone",
    "somebody",
    "everyone",
    "he's",
    "she's",
    "they're",
    "you're",
    "himself",
    "herself",
    "themselves",
];
const DETERMINERS: &[&str] = &[
    "my", "our", "his", "her", "their", "your", "its", "the", "a", "an", "this", "that",
];
const CLAUSE_WORDS: &[&str] = &["and", "but", "because"];

/// Shallow stand-in for a dependency parse: was the entity at `span`
/// experienced by the writer?
///
/// The sentence is split into clauses at `. ; ! ?` and the words "and",
/// "but", "because". Inside the clause holding the span, tokens before the
/// span are scanned right to left for the nearest subject: a first-person
/// pronoun yields `true`; another pronoun, or a noun introduced by a
/// determiner ("my brother", "the doctor"), yields `false`. No subject
/// found yields `false`.
pub fn attribute_first_person(sentence: &str, span: Range<usize>) -> Result<bool> {
    if span.start > span.end
        || span.end > sentence.len()
        || !sentence.is_char_boundary(span.start)
        || !sentence.is_char_boundary(span.end)
    {
        return Err(Error::IndexOutOfRange {
            index: span.end,
            valid: format!("0..={}", sentence.len()),
        });
    }
    let before = &sentence[..span.start];
    let clause_start = before.rfind(['.', ';', '!', '?']).map_or(0, |i| i + 1);
    let mut tokens = tokenize(&before[clause_start..]);
    if let Some(cut) = tokens
        .iter()
        .rposition(|t| CLAUSE_WORDS.contains(&t.as_str()))
    {
        tokens.drain(..=cut);
    }
    // a determiner right before the span belongs to the entity itself
    if tokens
        .last()
        .is_some_and(|t| DETERMINERS.contains(&t.as_str()))
    {
        tokens.pop();
    }
    for k in (0..tokens.len()).rev() {
        let tok = tokens[k].as_str();
        if FIRST_PERSON.contains(&tok) {
            return Ok(true);
        }
        if OTHER_PERSON.contains(&tok) {
            return Ok(false);
        }
        let is_noun_head =
            k > 0 && DETERMINERS.contains(&tokens[k - 1].as_str()) && !DETERMINERS.contains(&tok);
        if is_noun_head {
            return Ok(false);
        }
    }
    Ok(false)
}
