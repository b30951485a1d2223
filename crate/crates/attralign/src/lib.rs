//! Attribute-aligned cross-modal metric learning for person search by
//! natural language.
//!
//! The crate couples a rule-based language stream (phrase chunking plus
//! dictionary clustering over average-pooled word vectors) with a bounded
//! logistic alignment loss, k-reciprocal surrogate-positive mining, a
//! desk-scale joint trainer over precomputed features, and the retrieval
//! evaluation protocol (Recall@K, mAP, attribute-phrase retrieval, and a
//! malpositioned-matching probe).

pub mod check;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod sampler;
pub mod textparse;
pub mod trainer;
pub mod types;
pub mod vecops;

pub use error::{Error, Result};
pub use types::{AlignmentParams, AttributeCategory, Embedding, EmbeddingRecord, Modality};
