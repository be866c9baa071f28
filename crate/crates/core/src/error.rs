use std::path::PathBuf;

use thiserror::Error;

use crate::numerics::NumericsError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} not found: {}", path.display())]
    NotFound { what: &'static str, path: PathBuf },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("index {index} out of range (valid: {valid})")]
    IndexOutOfRange { index: usize, valid: String },

    #[error("text must be non-empty after trimming")]
    EmptyText,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),

    #[error("no embedding for unknown text {0:?}")]
    UnknownText(String),

    #[error("concept {0:?} has no embedding attached")]
    MissingConceptEmbedding(String),

    #[error("concept count mismatch: model was built for J={expected}, ontology has {got}")]
    ConceptCountMismatch { expected: usize, got: usize },

    #[error("ontology hash mismatch: checkpoint {checkpoint}, ontology {ontology}")]
    OntologyHashMismatch {
        checkpoint: String,
        ontology: String,
    },

    #[error("embedding dimension mismatch: checkpoint expects {checkpoint}, embeddings provide {provider}")]
    EmbeddingDimMismatch { checkpoint: usize, provider: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training split contains a single class")]
    SingleClassTraining,

    #[error(
        "AUC undefined on single-class data (precision {precision:.4}, recall {recall:.4}, f1 {f1:.4})"
    )]
    AucUndefined {
        precision: f64,
        recall: f64,
        f1: f64,
    },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error(transparent)]
    Numerics(#[from] NumericsError),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    /// Process exit code: 2 for missing, unparseable or invalid input, 3 for
    /// configuration mismatches, 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NotFound { .. }
            | Error::Parse { .. }
            | Error::Validation(_)
            | Error::Config(_) => 2,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            Error::ConceptCountMismatch { .. }
            | Error::OntologyHashMismatch { .. }
            | Error::EmbeddingDimMismatch { .. } => 3,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Reads a whole file, mapping a missing file to [`Error::NotFound`].
pub(crate) fn read_input(what: &'static str, path: &std::path::Path) -> Result<String> {
    match std::fs::read_to_string(path) {
        Ok(s) => Ok(s),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::NotFound {
            what,
            path: path.to_path_buf(),
        }),
        Err(e) => Err(Error::io(path, e)),
    }
}
