//! Domain types shared by every module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of aligned attribute slots. The global slot is tracked separately
/// and is never a sixth category.
pub const NUM_ATTRIBUTES: usize = 5;

/// The five appearance attribute slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeCategory {
    Head,
    UpperBody,
    LowerBody,
    Shoes,
    Bags,
}

impl AttributeCategory {
    /// All categories in their canonical (tie-breaking) order.
    pub const ALL: [AttributeCategory; NUM_ATTRIBUTES] = [
        AttributeCategory::Head,
        AttributeCategory::UpperBody,
        AttributeCategory::LowerBody,
        AttributeCategory::Shoes,
        AttributeCategory::Bags,
    ];

    pub fn index(self) -> usize {
        match self {
            AttributeCategory::Head => 0,
            AttributeCategory::UpperBody => 1,
            AttributeCategory::LowerBody => 2,
            AttributeCategory::Shoes => 3,
            AttributeCategory::Bags => 4,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Short key used in data files ("head", "upper", "lower", "shoes", "bags").
    pub fn key(self) -> &'static str {
        match self {
            AttributeCategory::Head => "head",
            AttributeCategory::UpperBody => "upper",
            AttributeCategory::LowerBody => "lower",
            AttributeCategory::Shoes => "shoes",
            AttributeCategory::Bags => "bags",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| c.key() == key)
    }
}

impl std::fmt::Display for AttributeCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Visual,
    Textual,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Modality::Visual => f.write_str("visual"),
            Modality::Textual => f.write_str("textual"),
        }
    }
}

/// A dense embedding with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "embedding",
            });
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// True when the L2 norm is within `tol` of 1.
    pub fn is_unit_norm(&self, tol: f64) -> bool {
        let norm = self.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        (norm - 1.0).abs() <= tol
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

/// Per-item embeddings: one global slot plus up to five attribute slots.
///
/// An attribute slot is present iff its embedding is stored, so the presence
/// mask can never drift out of sync with the stored vectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub person_id: u32,
    pub modality: Modality,
    pub global: Embedding,
    attrs: [Option<Embedding>; NUM_ATTRIBUTES],
}

impl EmbeddingRecord {
    pub fn new(
        person_id: u32,
        modality: Modality,
        global: Embedding,
        attrs: [Option<Embedding>; NUM_ATTRIBUTES],
    ) -> Result<Self> {
        let d = global.dim();
        for slot in attrs.iter().flatten() {
            if slot.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: slot.dim(),
                    context: "attribute embedding vs global",
                });
            }
        }
        Ok(Self {
            person_id,
            modality,
            global,
            attrs,
        })
    }

    pub fn attr(&self, category: AttributeCategory) -> Option<&Embedding> {
        self.attrs[category.index()].as_ref()
    }

    pub fn present(&self, category: AttributeCategory) -> bool {
        self.attrs[category.index()].is_some()
    }

    pub fn present_mask(&self) -> [bool; NUM_ATTRIBUTES] {
        let mut mask = [false; NUM_ATTRIBUTES];
        for (i, slot) in self.attrs.iter().enumerate() {
            mask[i] = slot.is_some();
        }
        mask
    }

    pub fn dim(&self) -> usize {
        self.global.dim()
    }
}

/// Hyperparameters of the bounded logistic alignment loss.
///
/// `beta` is always derived as `alpha - margin`; the constructor rejects any
/// combination violating `0 < margin < alpha <= 1` or non-positive
/// temperatures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AlignmentParams {
    alpha: f64,
    beta: f64,
    margin: f64,
    tau_p: f64,
    tau_n: f64,
}

impl AlignmentParams {
    pub fn new(alpha: f64, margin: f64, tau_p: f64, tau_n: f64) -> Result<Self> {
        if !(alpha.is_finite() && margin.is_finite() && tau_p.is_finite() && tau_n.is_finite()) {
            return Err(Error::NonFinite {
                context: "alignment params",
            });
        }
        if !(margin > 0.0 && margin < alpha && alpha <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < margin < alpha <= 1, got alpha={alpha} margin={margin}"
            )));
        }
        if tau_p <= 0.0 || tau_n <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "temperatures must be positive, got tau_p={tau_p} tau_n={tau_n}"
            )));
        }
        Ok(Self {
            alpha,
            beta: alpha - margin,
            margin,
            tau_p,
            tau_n,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn tau_p(&self) -> f64 {
        self.tau_p
    }

    pub fn tau_n(&self) -> f64 {
        self.tau_n
    }
}

impl Default for AlignmentParams {
    /// alpha 0.6, margin 0.2 (so beta 0.4), tau_p 10, tau_n 40.
    fn default() -> Self {
        Self::new(0.6, 0.2, 10.0, 40.0).expect("default params are valid")
    }
}

impl<'de> Deserialize<'de> for AlignmentParams {
    fn deserialize<D>(deserializer: D) -> std::result::Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        #[derive(Deserialize)]
        struct Raw {
            alpha: f64,
            margin: f64,
            tau_p: f64,
            tau_n: f64,
            // Accepted for round-tripping; must equal alpha - margin when given.
            beta: Option<f64>,
        }
        let raw = Raw::deserialize(deserializer)?;
        let params = AlignmentParams::new(raw.alpha, raw.margin, raw.tau_p, raw.tau_n)
            .map_err(serde::de::Error::custom)?;
        if let Some(beta) = raw.beta {
            if beta != params.beta {
                return Err(serde::de::Error::custom(format!(
                    "beta must equal alpha - margin ({}), got {beta}",
                    params.beta
                )));
            }
        }
        Ok(params)
    }
}
