//! Retrieval protocol: rank galleries by the combined global+attribute
//! score, compute Recall@K and mAP, run attribute-phrase retrieval, and probe
//! malpositioned matching with attribute-swapped distractors.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{phrase_value_label, textual_features, RawRecord};
use crate::encoder::{Model, RawFeatures};
use crate::error::{Error, Result};
use crate::textparse::TextPipeline;
use crate::trainer::TrainConfig;
use crate::types::{AttributeCategory, EmbeddingRecord, Modality};
use crate::vecops::{cosine, ZeroNormPolicy};

/// One query's ordered gallery: scores non-increasing, ties broken by
/// ascending gallery index, indices unique.
#[derive(Debug, Clone)]
pub struct RankingResult {
    query: usize,
    ranked: Vec<(usize, f64)>,
}

impl RankingResult {
    pub fn new(query: usize, mut scored: Vec<(usize, f64)>) -> Self {
        scored.sort_by(|(ia, sa), (ib, sb)| {
            sb.partial_cmp(sa)
                .expect("scores are finite")
                .then(ia.cmp(ib))
        });
        Self {
            query,
            ranked: scored,
        }
    }

    pub fn query(&self) -> usize {
        self.query
    }

    pub fn ranked(&self) -> &[(usize, f64)] {
        &self.ranked
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.ranked.iter().map(|&(i, _)| i)
    }
}

/// Global cosine plus `lambda` times the mean attribute cosine over
/// categories present on both sides; the attribute term is 0 when no category
/// is shared.
pub fn combined_score(
    query: &EmbeddingRecord,
    gallery_item: &EmbeddingRecord,
    lambda: f64,
    policy: ZeroNormPolicy,
) -> Result<f64> {
    let global = cosine(&query.global, &gallery_item.global, policy)?;
    if lambda == 0.0 {
        return Ok(global);
    }
    let mut sum = 0.0;
    let mut shared = 0usize;
    for cat in AttributeCategory::ALL {
        if let (Some(q), Some(g)) = (query.attr(cat), gallery_item.attr(cat)) {
            sum += cosine(q, g, policy)?;
            shared += 1;
        }
    }
    let attr_term = if shared > 0 { sum / shared as f64 } else { 0.0 };
    Ok(global + lambda * attr_term)
}

/// Score a query against every gallery item and sort.
pub fn rank_gallery(
    query_index: usize,
    query: &EmbeddingRecord,
    gallery: &[EmbeddingRecord],
    lambda: f64,
    policy: ZeroNormPolicy,
) -> Result<RankingResult> {
    let scored: Vec<(usize, f64)> = gallery
        .iter()
        .enumerate()
        .map(|(i, item)| Ok((i, combined_score(query, item, lambda, policy)?)))
        .collect::<Result<_>>()?;
    Ok(RankingResult::new(query_index, scored))
}

/// Fraction of queries whose top-k holds at least one gallery item of a
/// relevant identity. `relevant` is aligned with `rankings`.
pub fn recall_at_k(
    rankings: &[RankingResult],
    gallery_ids: &[u32],
    relevant: &[BTreeSet<u32>],
    k: usize,
) -> f64 {
    if rankings.is_empty() {
        return 0.0;
    }
    let hits = rankings
        .iter()
        .zip(relevant)
        .filter(|(ranking, rel)| {
            ranking
                .indices()
                .take(k)
                .any(|g| rel.contains(&gallery_ids[g]))
        })
        .count();
    hits as f64 / rankings.len() as f64
}

/// Mean over queries of average precision: precision at each relevant rank,
/// averaged over the query's total relevant gallery count.
pub fn mean_ap(
    rankings: &[RankingResult],
    gallery_ids: &[u32],
    relevant: &[BTreeSet<u32>],
) -> Result<f64> {
    if rankings.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (ranking, rel) in rankings.iter().zip(relevant) {
        let n_relevant = gallery_ids.iter().filter(|id| rel.contains(id)).count();
        if n_relevant == 0 {
            return Err(Error::NoRelevantItems {
                query: ranking.query(),
            });
        }
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank, g) in ranking.indices().enumerate() {
            if rel.contains(&gallery_ids[g]) {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
        }
        total += ap / n_relevant as f64;
    }
    Ok(total / rankings.len() as f64)
}

/// Result of one attribute-phrase retrieval run.
#[derive(Debug, Clone)]
pub struct AttributeRetrieval {
    pub ranking: RankingResult,
    /// Resolved relevance label of the query phrase, when known.
    pub query_label: Option<u32>,
    pub r1: Option<f64>,
    pub ap: Option<f64>,
}

/// Encode an attribute phrase through the textual attribute encoder and rank
/// the gallery by cosine against that category's visual embedding only.
/// Gallery items lacking the category are excluded; relevance comes from the
/// items' attribute value labels when the phrase's label is resolvable.
pub fn attribute_retrieve(
    phrase: &str,
    gallery: &[RawRecord],
    model: &Model,
    pipeline: &TextPipeline,
    category: AttributeCategory,
    policy: ZeroNormPolicy,
) -> Result<AttributeRetrieval> {
    let parsed = pipeline.parse(phrase);
    let tokens = parsed
        .category_tokens(category)
        .ok_or_else(|| Error::PhraseUnassignable(format!("'{phrase}' is not a {category} phrase")))?
        .to_vec();
    let phrase_vec = crate::textparse::embed_phrase(&tokens, &pipeline.store)?;

    let mut features = RawFeatures::global_only(vec![0.0; model.input_dims().txt_global]);
    features.attrs[category.index()] = Some(phrase_vec);
    let query = model.encode(&features, Modality::Textual, u32::MAX)?;
    let query_emb = query.attr(category).expect("phrase slot was encoded");

    let mut scored = Vec::new();
    let mut labels = Vec::new();
    for (gi, rec) in gallery.iter().enumerate() {
        let Some(raw) = &rec.features.attrs[category.index()] else {
            continue;
        };
        let encoded = model.encode(
            &RawFeatures {
                global: rec.features.global.clone(),
                attrs: {
                    let mut a: [Option<Vec<f64>>; crate::types::NUM_ATTRIBUTES] = Default::default();
                    a[category.index()] = Some(raw.clone());
                    a
                },
            },
            Modality::Visual,
            rec.person_id,
        )?;
        let emb = encoded.attr(category).expect("category just inserted");
        scored.push((gi, cosine(query_emb, emb, policy)?));
        labels.push((gi, rec.attr_labels[category.index()]));
    }
    let ranking = RankingResult::new(0, scored);

    let query_label = phrase_value_label(&tokens);
    let (r1, ap) = match query_label {
        Some(label) if !ranking.ranked().is_empty() => {
            let label_of = |gi: usize| -> Option<u32> {
                labels.iter().find(|(i, _)| *i == gi).and_then(|(_, l)| *l)
            };
            let n_relevant = labels
                .iter()
                .filter(|(_, l)| *l == Some(label))
                .count();
            if n_relevant == 0 {
                (None, None)
            } else {
                let top = ranking.ranked()[0].0;
                let r1 = if label_of(top) == Some(label) { 1.0 } else { 0.0 };
                let mut hits = 0usize;
                let mut ap = 0.0;
                for (rank, gi) in ranking.indices().enumerate() {
                    if label_of(gi) == Some(label) {
                        hits += 1;
                        ap += hits as f64 / (rank + 1) as f64;
                    }
                }
                (Some(r1), Some(ap / n_relevant as f64))
            }
        }
        _ => (None, None),
    };
    Ok(AttributeRetrieval {
        ranking,
        query_label,
        r1,
        ap,
    })
}

/// A malpositioned-matching probe case: the distractor carries the target's
/// attribute features with two categories swapped, so both share the same
/// multiset of attribute cues arranged differently.
#[derive(Debug, Clone)]
pub struct ProbeCase {
    pub query_text: String,
    pub target: RawFeatures,
    pub distractor: RawFeatures,
}

/// Build swap cases from generated records: the query is the identity's
/// description, the target one of its visual records, and the distractor the
/// same record with upper- and lower-body raw features exchanged. Identities
/// whose two values coincide are skipped (the swap would be a no-op).
pub fn build_probe_cases(
    visual: &[&RawRecord],
    textual: &[&RawRecord],
    count: usize,
    seed: u64,
) -> Vec<ProbeCase> {
    let upper = AttributeCategory::UpperBody.index();
    let lower = AttributeCategory::LowerBody.index();
    let eligible: Vec<&&RawRecord> = visual
        .iter()
        .filter(|r| {
            r.features.attrs[upper].is_some()
                && r.features.attrs[lower].is_some()
                && match (r.attr_labels[upper], r.attr_labels[lower]) {
                    (Some(a), Some(b)) => a != b,
                    _ => true,
                }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(count);
    if eligible.is_empty() {
        return cases;
    }
    while cases.len() < count {
        let rec = eligible[rng.gen_range(0..eligible.len())];
        let Some(text) = textual
            .iter()
            .filter(|t| t.person_id == rec.person_id)
            .filter_map(|t| t.text.clone())
            .next()
        else {
            continue;
        };
        let mut distractor = rec.features.clone();
        distractor.attrs.swap(upper, lower);
        cases.push(ProbeCase {
            query_text: text,
            target: rec.features.clone(),
            distractor,
        });
    }
    cases
}

/// Fraction of cases scoring the target above the distractor. Exact ties
/// (e.g. identical globals under lambda = 0) are broken by a seeded coin.
pub fn probe_malpositioned(
    cases: &[ProbeCase],
    model: &Model,
    pipeline: &TextPipeline,
    cfg: &TrainConfig,
    lambda: f64,
    seed: u64,
) -> Result<f64> {
    if cases.is_empty() {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wins = 0usize;
    for case in cases {
        let query_raw = textual_features(&case.query_text, pipeline)?;
        let query = model.encode(&query_raw, Modality::Textual, 0)?;
        let target = model.encode(&case.target, Modality::Visual, 0)?;
        let distractor = model.encode(&case.distractor, Modality::Visual, 0)?;
        let s_target = combined_score(&query, &target, lambda, cfg.zero_norm)?;
        let s_distractor = combined_score(&query, &distractor, lambda, cfg.zero_norm)?;
        if s_target > s_distractor {
            wins += 1;
        } else if s_target == s_distractor && rng.gen_bool(0.5) {
            wins += 1;
        }
    }
    Ok(wins as f64 / cases.len() as f64)
}
