//! Fixed-dimension text vectors and the cosine kernel.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{read_input, Error, Result};

pub const DEFAULT_DIM: usize = 32;

/// What a table-backed provider does with text it has no row for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnknownPolicy {
    #[default]
    Error,
    Fallback,
}

#[derive(Debug, Clone)]
enum Source {
    Table {
        rows: HashMap<String, Vec<f64>>,
        unknown: UnknownPolicy,
    },
    Hashed,
}

/// Maps text to a `dim`-component vector. Deterministic and immutable once built.
#[derive(Debug, Clone)]
pub struct EmbeddingProvider {
    dim: usize,
    source: Source,
}

fn key(text: &str) -> String {
    text.trim().to_lowercase()
}

impl EmbeddingProvider {
    /// Hash-seeded unit vectors: each text seeds its own generator.
    pub fn hashed(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(EmbeddingProvider {
            dim,
            source: Source::Hashed,
        })
    }

    pub fn from_table(
        dim: usize,
        rows: impl IntoIterator<Item = (String, Vec<f64>)>,
        unknown: UnknownPolicy,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let mut table = HashMap::new();
        for (text, row) in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "non-finite embedding for {text:?}"
                )));
            }
            let k = key(&text);
            if k.is_empty() {
                return Err(Error::EmptyText);
            }
            table.insert(k, row);
        }
        Ok(EmbeddingProvider {
            dim,
            source: Source::Table {
                rows: table,
                unknown,
            },
        })
    }

    /// Loads a table file: a `dim <d>` header, then one row per line with
    /// the text followed by `d` decimals. Fields are tab-separated; lines
    /// without tabs take the last `d` whitespace tokens as the vector.
    pub fn load_table(path: &Path, unknown: UnknownPolicy) -> Result<Self> {
        let body = read_input("embedding table", path)?;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = body
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing `dim <d>` header".into()))?;
        let dim = header
            .trim()
            .strip_prefix("dim")
            .and_then(|d| d.trim().parse::<usize>().ok())
            .filter(|&d| d > 0)
            .ok_or_else(|| parse_err(1, format!("bad header {header:?}")))?;

        let mut rows = Vec::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            let (text, nums): (String, Vec<&str>) = if line.contains('\t') {
                let mut fields = line.split('\t');
                let text = fields.next().unwrap_or_default().to_string();
                (text, fields.collect())
            } else {
                let toks: Vec<&str> = line.split_whitespace().collect();
                if toks.len() <= dim {
                    return Err(parse_err(lineno, format!("expected text and {dim} values")));
                }
                let split = toks.len() - dim;
                (toks[..split].join(" "), toks[split..].to_vec())
            };
            if nums.len() != dim {
                return Err(parse_err(
                    lineno,
                    format!("expected {dim} values, found {}", nums.len()),
                ));
            }
            let row = nums
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(lineno, e.to_string()))?;
            if key(&text).is_empty() {
                return Err(parse_err(lineno, "empty text".into()));
            }
            rows.push((text, row));
        }
        Self::from_table(dim, rows, unknown)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Same table, different unknown-text policy. No-op for hashed providers.
    pub fn with_unknown_policy(mut self, policy: UnknownPolicy) -> Self {
        if let Source::Table { unknown, .. } = &mut self.source {
            *unknown = policy;
        }
        self
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let k = key(text);
        if k.is_empty() {
            return Err(Error::EmptyText);
        }
        match &self.source {
            Source::Hashed => Ok(hashed_unit_vector(&k, self.dim)),
            Source::Table { rows, unknown } => match rows.get(&k) {
                Some(row) => Ok(row.clone()),
                None => match unknown {
                    UnknownPolicy::Error => Err(Error::UnknownText(text.to_string())),
                    UnknownPolicy::Fallback => Ok(hashed_unit_vector(&k, self.dim)),
                },
            },
        }
    }
}

/// Deterministic unit vector for `text`: SHA-256 of the text seeds a
/// ChaCha generator that draws standard normals, then the draw is normalized.
pub fn hashed_unit_vector(text: &str, dim: usize) -> Vec<f64> {
    let digest = Sha256::digest(text.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine"));
    }
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((d / (na * nb)).clamp(-1.0, 1.0))
}

/// Renders rows in the table-file format read by [`EmbeddingProvider::load_table`].
pub fn write_table<'a>(dim: usize, rows: impl IntoIterator<Item = (&'a str, &'a [f64])>) -> String {
    let mut out = format!("dim {dim}\n");
    for (text, row) in rows {
        out.push_str(text);
        for v in row {
            let _ = write!(out, "\t{v:?}");
        }
        out.push('\n');
    }
    out
}
