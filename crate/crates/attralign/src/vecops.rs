//! Elementary vector operations: cosine scoring, normalization, top-K.

use crate::error::{Error, Result};
use crate::types::Embedding;

/// How to treat vectors with zero L2 norm when scoring.
///
/// Strict mode refuses them so training never silently propagates NaN;
/// lenient mode scores them as 0 (degenerate rows can occur in synthetic
/// data).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroNormPolicy {
    Strict,
    Lenient,
}

impl Default for ZeroNormPolicy {
    fn default() -> Self {
        ZeroNormPolicy::Strict
    }
}

/// Cosine similarity over raw slices. Result is clamped to [-1, 1].
pub fn cosine_slice(a: &[f64], b: &[f64], policy: ZeroNormPolicy) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
            context: "cosine",
        });
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return match policy {
            ZeroNormPolicy::Strict => Err(Error::ZeroNormVector { context: "cosine" }),
            ZeroNormPolicy::Lenient => {
                log::warn!("cosine over zero-norm vector scored as 0");
                Ok(0.0)
            }
        };
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Cosine similarity between two embeddings.
pub fn cosine(a: &Embedding, b: &Embedding, policy: ZeroNormPolicy) -> Result<f64> {
    cosine_slice(a.values(), b.values(), policy)
}

/// Scale a vector to unit L2 norm.
pub fn l2_normalize(a: &Embedding) -> Result<Embedding> {
    let norm = a.values().iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroNormVector {
            context: "l2_normalize",
        });
    }
    let out = Embedding::new(a.values().iter().map(|v| v / norm).collect())?;
    debug_assert!(out.is_unit_norm(1e-6));
    Ok(out)
}

/// Indices of the `min(k, pool.len())` pool entries most cosine-similar to
/// `query`, descending by score with ties broken by ascending index.
pub fn top_k(
    query: &Embedding,
    pool: &[Embedding],
    k: usize,
    policy: ZeroNormPolicy,
) -> Result<Vec<usize>> {
    let slices: Vec<&[f64]> = pool.iter().map(|e| e.values()).collect();
    top_k_slices(query.values(), &slices, k, policy)
}

pub(crate) fn top_k_slices(
    query: &[f64],
    pool: &[&[f64]],
    k: usize,
    policy: ZeroNormPolicy,
) -> Result<Vec<usize>> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    if k == 0 {
        return Err(Error::InvalidParameter("top_k requires k >= 1".into()));
    }
    let mut scored = Vec::with_capacity(pool.len());
    for (i, item) in pool.iter().enumerate() {
        scored.push((i, cosine_slice(query, item, policy)?));
    }
    scored.sort_by(|(ia, sa), (ib, sb)| {
        sb.partial_cmp(sa)
            .expect("cosine scores are finite")
            .then(ia.cmp(ib))
    });
    scored.truncate(k.min(pool.len()));
    Ok(scored.into_iter().map(|(i, _)| i).collect())
}
