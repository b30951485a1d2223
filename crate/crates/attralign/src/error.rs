use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("zero-norm vector: {context}")]
    ZeroNormVector { context: &'static str },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },

    #[error("empty pool")]
    EmptyPool,

    #[error("empty batch: no positive or negative pairs")]
    EmptyBatch,

    #[error("empty phrase")]
    EmptyPhrase,

    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate batch: fewer than two distinct identities")]
    DegenerateBatch,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("phrase not assignable to requested category: {0}")]
    PhraseUnassignable(String),

    #[error("query {query} has no relevant gallery items")]
    NoRelevantItems { query: usize },

    #[error("similarity {value} outside [-1, 1]")]
    SimilarityOutOfRange { value: f64 },

    #[error("{file}:{line}: {msg}")]
    DataFormat {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
