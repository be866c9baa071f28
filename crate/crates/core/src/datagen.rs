//! Synthetic labeled traces with planted ontology and recency signal, a
//! lexicon tagger for raw text, and a bag-of-concepts baseline used to check
//! that a generated corpus is learnable at all.

use std::collections::HashSet;
use std::ops::Range;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::EmbeddingProvider;
use crate::error::{read_input, Error, Result};
use crate::ontology::Ontology;
use crate::trace::{EntityRecord, UserTrace};
use crate::training::metrics::auc;

/// Decision time shared by every generated user (2023-11-14T22:13:20Z).
pub const DECISION_TIME: i64 = 1_700_000_000;
const DAY: i64 = 86_400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_users: usize,
    /// Negatives per positive.
    pub imbalance: f64,
    /// Inclusive range of entities per user.
    pub entities: (usize, usize),
    pub horizon_days: u32,
    /// Width of the "near the decision time" window.
    pub recent_days: u32,
    /// Per-entity probability that a positive user mentions a concept in the
    /// first person, the concept drawn proportionally to its frequency.
    pub ontology_lift: f64,
    /// Probability that such a mention falls in the recent window rather
    /// than uniformly over the horizon.
    pub recency_lift: f64,
    /// Per-entity probability, in both classes, of a concept mentioned about
    /// someone else (uniform over concepts).
    pub background_rate: f64,
    /// Per-entity probability that a negative user mentions a concept in the
    /// first person, inside a past episode as wide as the recent window that
    /// ended one to five window widths before the decision time.
    /// Matching it to `ontology_lift` (with full `recency_lift`) leaves
    /// distance to the decision time as the only class difference.
    pub history_rate: f64,
    /// Per-entity probability that a negative user mentions a concept about
    /// someone else, the concept drawn proportionally to its frequency.
    /// Together with `negative_noise_first_person` this removes every class
    /// difference except "concept mentioned in the first person".
    pub decoy_rate: f64,
    /// Probability that a noise word is marked first person.
    pub noise_first_person: f64,
    /// Overrides `noise_first_person` for negative users.
    pub negative_noise_first_person: Option<f64>,
    pub noise_vocab: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_users: 700,
            imbalance: 6.0,
            entities: (16, 40),
            horizon_days: 730,
            recent_days: 14,
            ontology_lift: 0.4,
            recency_lift: 0.5,
            background_rate: 0.1,
            history_rate: 0.0,
            decoy_rate: 0.0,
            noise_first_person: 0.5,
            negative_noise_first_person: None,
            noise_vocab: 1000,
            seed: 0,
        }
    }
}

impl GenConfig {
    /// Classes differ only in whether concepts are mentioned in the first
    /// person: negatives mention the same concepts about someone else, and
    /// their noise words carry extra first-person marks so the overall
    /// first-person rate matches.
    pub fn ontology_planted(seed: u64) -> Self {
        let lift = 0.15;
        let q = 0.5;
        GenConfig {
            ontology_lift: lift,
            recency_lift: 0.0,
            background_rate: 0.0,
            decoy_rate: lift,
            noise_first_person: q,
            negative_noise_first_person: Some((lift + (1.0 - lift) * q) / (1.0 - lift)),
            seed,
            ..GenConfig::default()
        }
    }

    /// Both classes report the same concepts in the first person at the same
    /// rate; positives do so in the last `recent_days`, negatives in an
    /// earlier episode of equal width.
    pub fn recency_planted(seed: u64) -> Self {
        GenConfig {
            ontology_lift: 0.3,
            recency_lift: 1.0,
            history_rate: 0.3,
            seed,
            ..GenConfig::default()
        }
    }

    pub fn n_positive(&self) -> usize {
        (self.n_users as f64 / (1.0 + self.imbalance)).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.imbalance > 0.0 && self.imbalance.is_finite()) {
            return bad(format!(
                "imbalance ratio must be positive, got {}",
                self.imbalance
            ));
        }
        if self.recent_days == 0 || 6 * self.recent_days > self.horizon_days {
            return bad("need 0 < 6 × recent_days ≤ horizon_days".into());
        }
        if self.entities.0 == 0 || self.entities.0 > self.entities.1 {
            return bad(format!("invalid entity range {:?}", self.entities));
        }
        let rates = [
            ("ontology_lift", self.ontology_lift),
            ("recency_lift", self.recency_lift),
            ("background_rate", self.background_rate),
            ("history_rate", self.history_rate),
            ("decoy_rate", self.decoy_rate),
            ("noise_first_person", self.noise_first_person),
            (
                "negative_noise_first_person",
                self.negative_noise_first_person.unwrap_or(0.0),
            ),
        ];
        for (name, v) in rates {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0,1], got {v}"));
            }
        }
        if self.noise_vocab == 0 {
            return bad("noise vocabulary must not be empty".into());
        }
        let pos = self.n_positive();
        if pos == 0 || pos >= self.n_users {
            return bad(format!(
                "{} users at 1:{} yield {pos} positives; both classes are required",
                self.n_users, self.imbalance
            ));
        }
        Ok(())
    }
}

/// Pronounceable pseudo-words derived from a hash of their index, skipping
/// anything that collides with an ontology surface form.
pub fn noise_vocabulary(size: usize, ontology: &Ontology) -> Vec<String> {
    const ONSETS: [&str; 16] = [
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st",
    ];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    let reserved: HashSet<String> = ontology
        .concepts()
        .iter()
        .flat_map(|c| c.surface_forms())
        .flat_map(|f| {
            f.split_whitespace()
                .map(str::to_lowercase)
                .collect::<Vec<_>>()
        })
        .collect();
    let mut seen = HashSet::new();
    let mut words = Vec::with_capacity(size);
    let mut k = 0u64;
    while words.len() < size {
        let digest = Sha256::digest(k.to_le_bytes());
        k += 1;
        let syllables = 2 + (digest[0] % 3) as usize;
        let word: String = (0..syllables)
            .map(|s| {
                let b = digest[1 + s];
                format!(
                    "{}{}",
                    ONSETS[(b >> 4) as usize],
                    VOWELS[(b & 0x0f) as usize % 5]
                )
            })
            .collect();
        if !reserved.contains(&word) && seen.insert(word.clone()) {
            words.push(word);
        }
    }
    words
}

fn sentence_for(text: &str, first_person: bool) -> String {
    if first_person {
        format!("lately i have been dealing with {text}")
    } else {
        format!("my sister has been dealing with {text}")
    }
}

/// Generates `n_users` labeled traces, `round(n / (1 + imbalance))` of them
/// positive, in user-id order.
pub fn generate(
    config: &GenConfig,
    ontology: &Ontology,
    provider: &EmbeddingProvider,
) -> Result<Vec<UserTrace>> {
    config.validate()?;
    let vocab = noise_vocabulary(config.noise_vocab, ontology);
    let by_freq = WeightedIndex::new(ontology.concepts().iter().map(|c| c.freq))
        .map_err(|e| Error::Config(format!("concept frequencies cannot be sampled from: {e}")))?;

    let mut labels = vec![false; config.n_users];
    labels[..config.n_positive()].fill(true);
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let width = config.n_users.to_string().len();

    labels
        .par_iter()
        .enumerate()
        .map(|(u, &label)| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(u as u64 + 1);
            let horizon = config.horizon_days as i64 * DAY;
            let recent = config.recent_days as i64 * DAY;
            let n = rng.random_range(config.entities.0..=config.entities.1);
            let episode = rng.random_range(recent..=5 * recent);
            let mut entities = Vec::with_capacity(n);
            for _ in 0..n {
                let planted = if label {
                    config.ontology_lift
                } else {
                    config.history_rate
                };
                let (text, first_person, offset) = if rng.random_bool(planted) {
                    let c = &ontology.concepts()[by_freq.sample(&mut rng)];
                    let offset = if !label {
                        episode + rng.random_range(0..=recent)
                    } else if rng.random_bool(config.recency_lift) {
                        rng.random_range(0..=recent)
                    } else {
                        rng.random_range(0..=horizon)
                    };
                    (c.term.clone(), true, offset)
                } else if !label && rng.random_bool(config.decoy_rate) {
                    let c = &ontology.concepts()[by_freq.sample(&mut rng)];
                    (c.term.clone(), false, rng.random_range(0..=horizon))
                } else if rng.random_bool(config.background_rate) {
                    let c = &ontology.concepts()[rng.random_range(0..ontology.len())];
                    (c.term.clone(), false, rng.random_range(0..=horizon))
                } else {
                    let w = vocab[rng.random_range(0..vocab.len())].clone();
                    let fp = match config.negative_noise_first_person {
                        Some(q) if !label => q,
                        _ => config.noise_first_person,
                    };
                    (w, rng.random_bool(fp), rng.random_range(0..=horizon))
                };
                entities.push(EntityRecord {
                    embedding: provider.embed(&text)?,
                    sentence: Some(sentence_for(&text, first_person)),
                    text,
                    timestamp: DECISION_TIME - offset,
                    first_person,
                });
            }
            UserTrace::new(
                format!("user{:0width$}", u + 1),
                entities,
                Some(DECISION_TIME),
                Some(label),
            )
        })
        .collect()
}

/// One lexicon entry: a canonical term and its alternative surface forms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LexiconEntry {
    pub term: String,
    pub synonyms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Lexicon {
    pub entries: Vec<LexiconEntry>,
}

impl Lexicon {
    pub fn from_terms<S: Into<String>>(terms: impl IntoIterator<Item = S>) -> Self {
        Lexicon {
            entries: terms
                .into_iter()
                .map(|t| LexiconEntry {
                    term: t.into(),
                    synonyms: Vec::new(),
                })
                .collect(),
        }
    }

    pub fn from_ontology(ontology: &Ontology) -> Self {
        Lexicon {
            entries: ontology
                .concepts()
                .iter()
                .map(|c| LexiconEntry {
                    term: c.term.clone(),
                    synonyms: c.synonyms.clone(),
                })
                .collect(),
        }
    }

    /// One term per line, optionally followed by tab-separated synonyms.
    /// Blank lines and lines starting with `#` are skipped.
    pub fn parse(body: &str) -> Self {
        let entries = body
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
            .map(|l| {
                let mut parts = l.split('\t').map(str::trim).filter(|p| !p.is_empty());
                LexiconEntry {
                    term: parts.next().unwrap_or_default().to_string(),
                    synonyms: parts.map(String::from).collect(),
                }
            })
            .collect();
        Lexicon { entries }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::parse(&read_input("lexicon", path)?))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityMatch {
    /// Byte range in the input text.
    pub span: Range<usize>,
    /// Canonical lexicon term of the matched surface form.
    pub term: String,
}

/// Length in bytes of `text` that matches `form` case-insensitively at its
/// start, if it does.
fn match_len(text: &str, form: &str) -> Option<usize> {
    let mut t = text.char_indices();
    for fc in form.chars() {
        let (_, tc) = t.next()?;
        if !tc.to_lowercase().eq(fc.to_lowercase()) {
            return None;
        }
    }
    Some(t.next().map_or(text.len(), |(i, _)| i))
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\''
}

/// Scans left to right; at each word start the longest surface form that
/// matches case-insensitively and ends at a word boundary wins, and
/// scanning resumes after it.
pub fn tag_entities(text: &str, lexicon: &Lexicon) -> Vec<EntityMatch> {
    let forms: Vec<(&str, &str)> = lexicon
        .entries
        .iter()
        .flat_map(|e| {
            std::iter::once(e.term.as_str())
                .chain(e.synonyms.iter().map(String::as_str))
                .map(move |f| (f.trim(), e.term.as_str()))
        })
        .filter(|(f, _)| !f.is_empty())
        .collect();
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < text.len() {
        let rest = &text[pos..];
        let at_word_start = text[..pos]
            .chars()
            .next_back()
            .is_none_or(|c| !is_word_char(c));
        let best = if at_word_start {
            forms
                .iter()
                .filter_map(|&(form, term)| {
                    let len = match_len(rest, form)?;
                    let ends_word = rest[len..].chars().next().is_none_or(|c| !is_word_char(c));
                    ends_word.then_some((len, term))
                })
                .max_by_key(|&(len, _)| len)
        } else {
            None
        };
        match best {
            Some((len, term)) => {
                out.push(EntityMatch {
                    span: pos..pos + len,
                    term: term.to_string(),
                });
                pos += len;
            }
            None => pos += rest.chars().next().map_or(1, char::len_utf8),
        }
    }
    out
}

/// Logistic regression on frequency-weighted concept counts: feature `j` of
/// a user is `freq_j × (mentions of concept j) / (entities of the user)`.
/// Ignores time, person and everything that is not an exact concept term.
#[derive(Debug, Clone)]
pub struct ConceptBagOracle {
    weights: Vec<f64>,
    bias: f64,
}

impl ConceptBagOracle {
    pub fn features(trace: &UserTrace, ontology: &Ontology) -> Vec<f64> {
        let mut x = vec![0.0; ontology.len()];
        for e in trace.entities() {
            if let Some(j) = ontology.find(&e.text) {
                x[j] += ontology.concepts()[j].freq;
            }
        }
        let n = trace.len().max(1) as f64;
        x.iter_mut().for_each(|v| *v /= n);
        x
    }

    /// Full-batch gradient descent on the class-balanced logistic loss with
    /// a small ridge penalty.
    pub fn fit(traces: &[UserTrace], ontology: &Ontology) -> Result<Self> {
        let xs: Vec<Vec<f64>> = traces.iter().map(|t| Self::features(t, ontology)).collect();
        let ys: Vec<bool> = traces
            .iter()
            .map(|t| {
                t.label().ok_or_else(|| {
                    Error::Validation(format!("user {:?} is unlabeled", t.user_id()))
                })
            })
            .collect::<Result<_>>()?;
        let n_pos = ys.iter().filter(|&&y| y).count() as f64;
        let n_neg = ys.len() as f64 - n_pos;
        if n_pos == 0.0 || n_neg == 0.0 {
            return Err(Error::SingleClassTraining);
        }
        let mut m = ConceptBagOracle {
            weights: vec![0.0; ontology.len()],
            bias: 0.0,
        };
        let (lr, ridge) = (2.0, 1e-4);
        for _ in 0..2000 {
            let mut gw = vec![0.0; m.weights.len()];
            let mut gb = 0.0;
            for (x, &y) in xs.iter().zip(&ys) {
                let p = crate::numerics::sigmoid(m.logit(x));
                let w = if y { 0.5 / n_pos } else { 0.5 / n_neg };
                let r = w * (p - if y { 1.0 } else { 0.0 });
                gb += r;
                gw.iter_mut().zip(x).for_each(|(g, xi)| *g += r * xi);
            }
            for (w, g) in m.weights.iter_mut().zip(&gw) {
                *w -= lr * (g + ridge * *w);
            }
            m.bias -= lr * gb;
        }
        Ok(m)
    }

    fn logit(&self, x: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()
    }

    pub fn score(&self, trace: &UserTrace, ontology: &Ontology) -> f64 {
        self.logit(&Self::features(trace, ontology))
    }

    /// Held-out AUC; `None` when the evaluation set has one class.
    pub fn auc(&self, traces: &[UserTrace], ontology: &Ontology) -> Option<f64> {
        let s: Vec<f64> = traces.iter().map(|t| self.score(t, ontology)).collect();
        let l: Vec<bool> = traces.iter().map(|t| t.label() == Some(true)).collect();
        auc(&s, &l)
    }
}
