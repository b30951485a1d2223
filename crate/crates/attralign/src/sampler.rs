//! K-reciprocal mining of surrogate positive cross-modal samples: a textual
//! item counts as a surrogate positive of a visual item when each lies in the
//! other's top-k cosine neighborhood.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::types::Embedding;
use crate::vecops::{self, ZeroNormPolicy};

/// One attribute's visual and textual pools. Items missing the attribute must
/// be excluded before construction; the stored indices are the caller's
/// (e.g. batch-slot) indices.
#[derive(Debug, Clone)]
pub struct SamplerInput {
    visual: Vec<(usize, Embedding)>,
    textual: Vec<(usize, Embedding)>,
    k: usize,
}

impl SamplerInput {
    pub fn new(
        visual: Vec<(usize, Embedding)>,
        textual: Vec<(usize, Embedding)>,
        k: usize,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParameter("sampler requires k >= 1".into()));
        }
        if visual.is_empty() || textual.is_empty() {
            return Err(Error::EmptyPool);
        }
        Ok(Self { visual, textual, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

/// Per-visual-item sets of reciprocal textual neighbors.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct SurrogatePositiveSet {
    map: BTreeMap<usize, BTreeSet<usize>>,
}

impl SurrogatePositiveSet {
    pub fn get(&self, visual: usize) -> Option<&BTreeSet<usize>> {
        self.map.get(&visual)
    }

    pub fn contains(&self, visual: usize, textual: usize) -> bool {
        self.map.get(&visual).is_some_and(|s| s.contains(&textual))
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &BTreeSet<usize>)> + '_ {
        self.map.iter().map(|(&v, s)| (v, s))
    }

    pub fn pair_count(&self) -> usize {
        self.map.values().map(|s| s.len()).sum()
    }
}

/// Mine reciprocal cross-modal neighbors: for each visual item, keep the
/// textual top-k neighbors whose own visual top-k contains it.
pub fn k_reciprocal_sample(input: &SamplerInput) -> Result<SurrogatePositiveSet> {
    let visual_slices: Vec<&[f64]> = input.visual.iter().map(|(_, e)| e.values()).collect();
    let textual_slices: Vec<&[f64]> = input.textual.iter().map(|(_, e)| e.values()).collect();

    // Positions (not caller indices) of each textual item's top-k visual pool.
    let mut visual_topk_of_textual = Vec::with_capacity(textual_slices.len());
    for t in &textual_slices {
        let top = vecops::top_k_slices(t, &visual_slices, input.k, ZeroNormPolicy::Strict)?;
        visual_topk_of_textual.push(top.into_iter().collect::<BTreeSet<usize>>());
    }

    let mut map = BTreeMap::new();
    for (v_pos, (v_index, _)) in input.visual.iter().enumerate() {
        let neighbors = vecops::top_k_slices(
            visual_slices[v_pos],
            &textual_slices,
            input.k,
            ZeroNormPolicy::Strict,
        )?;
        let reciprocal: BTreeSet<usize> = neighbors
            .into_iter()
            .filter(|&t_pos| visual_topk_of_textual[t_pos].contains(&v_pos))
            .map(|t_pos| input.textual[t_pos].0)
            .collect();
        map.insert(*v_index, reciprocal);
    }
    Ok(SurrogatePositiveSet { map })
}

/// Brute-force reference for [`k_reciprocal_sample`]: materialize the full
/// cosine matrix, fully sort both directions, and apply the reciprocity
/// predicate literally. Intended for small pools.
pub fn k_reciprocal_oracle(input: &SamplerInput) -> Result<SurrogatePositiveSet> {
    let nv = input.visual.len();
    let nt = input.textual.len();

    let mut sims = vec![vec![0.0; nt]; nv];
    for (i, (_, v)) in input.visual.iter().enumerate() {
        for (j, (_, t)) in input.textual.iter().enumerate() {
            sims[i][j] = plain_cosine(v.values(), t.values())?;
        }
    }

    let rank = |scores: Vec<(usize, f64)>, k: usize| -> BTreeSet<usize> {
        let mut scored = scores;
        scored.sort_by(|(ia, sa), (ib, sb)| sb.partial_cmp(sa).unwrap().then(ia.cmp(ib)));
        scored.truncate(k);
        scored.into_iter().map(|(i, _)| i).collect()
    };

    let mut map = BTreeMap::new();
    for v_pos in 0..nv {
        let textual_neighbors = rank(
            (0..nt).map(|j| (j, sims[v_pos][j])).collect(),
            input.k.min(nt),
        );
        let mut set = BTreeSet::new();
        for t_pos in textual_neighbors {
            let visual_neighbors = rank(
                (0..nv).map(|i| (i, sims[i][t_pos])).collect(),
                input.k.min(nv),
            );
            if visual_neighbors.contains(&v_pos) {
                set.insert(input.textual[t_pos].0);
            }
        }
        map.insert(input.visual[v_pos].0, set);
    }
    Ok(SurrogatePositiveSet { map })
}

fn plain_cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNormVector { context: "oracle" });
    }
    Ok(dot / (na * nb))
}

/// Origin of a positive pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PairProvenance {
    SameId,
    Surrogate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PositivePair {
    pub visual: usize,
    pub textual: usize,
    pub provenance: PairProvenance,
}

/// Union of same-identity cross-modal pairs and mined surrogate pairs.
/// A `None` identity marks an item that does not participate (e.g. the
/// attribute is absent on that side). Pairs present in both sources collapse
/// to same-id provenance. Output is sorted by (visual, textual).
pub fn build_positive_pairs(
    visual_ids: &[Option<u32>],
    textual_ids: &[Option<u32>],
    surrogates: &SurrogatePositiveSet,
) -> Vec<PositivePair> {
    let mut pairs = BTreeMap::new();
    for (v, vid) in visual_ids.iter().enumerate() {
        let Some(vid) = vid else { continue };
        for (t, tid) in textual_ids.iter().enumerate() {
            if Some(vid) == tid.as_ref() {
                pairs.insert((v, t), PairProvenance::SameId);
            }
        }
    }
    for (v, set) in surrogates.iter() {
        for &t in set {
            pairs.entry((v, t)).or_insert(PairProvenance::Surrogate);
        }
    }
    pairs
        .into_iter()
        .map(|((visual, textual), provenance)| PositivePair {
            visual,
            textual,
            provenance,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn emb(values: &[f64]) -> Embedding {
        Embedding::new(values.to_vec()).unwrap()
    }

    fn indexed(vecs: &[&[f64]]) -> Vec<(usize, Embedding)> {
        vecs.iter().enumerate().map(|(i, v)| (i, emb(v))).collect()
    }

    fn random_input(rng: &mut ChaCha8Rng, n: usize, d: usize, k: usize) -> SamplerInput {
        let gen = |rng: &mut ChaCha8Rng| -> Vec<(usize, Embedding)> {
            (0..n)
                .map(|i| {
                    let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    (i, emb(&v))
                })
                .collect()
        };
        SamplerInput::new(gen(rng), gen(rng), k).unwrap()
    }

    #[test]
    fn identical_pools_pair_with_themselves() {
        let input = SamplerInput::new(
            indexed(&[&[1.0, 0.0], &[0.0, 1.0]]),
            indexed(&[&[1.0, 0.0], &[0.0, 1.0]]),
            1,
        )
        .unwrap();
        let out = k_reciprocal_sample(&input).unwrap();
        assert_eq!(out.get(0).unwrap().iter().copied().collect::<Vec<_>>(), [0]);
        assert_eq!(out.get(1).unwrap().iter().copied().collect::<Vec<_>>(), [1]);
    }

    #[test]
    fn singleton_pools_always_reciprocal() {
        let input = SamplerInput::new(
            indexed(&[&[1.0, 0.0]]),
            indexed(&[&[0.0, 1.0]]),
            1,
        )
        .unwrap();
        let out = k_reciprocal_sample(&input).unwrap();
        assert!(out.contains(0, 0));
    }

    #[test]
    fn non_reciprocal_neighbor_excluded() {
        // textual 0's top-1 visual is 0 only, so visual 1 gets nothing
        let input = SamplerInput::new(
            indexed(&[&[1.0, 0.0], &[0.9, 0.1]]),
            indexed(&[&[1.0, 0.0]]),
            1,
        )
        .unwrap();
        let out = k_reciprocal_sample(&input).unwrap();
        assert!(out.contains(0, 0));
        assert!(out.get(1).unwrap().is_empty());
        assert_eq!(k_reciprocal_oracle(&input).unwrap(), out);
    }

    #[test]
    fn large_k_makes_reciprocity_vacuous() {
        let input = SamplerInput::new(
            indexed(&[&[1.0, 0.2], &[0.3, 1.0], &[-0.5, 0.4]]),
            indexed(&[&[0.9, 0.1], &[0.2, -0.7]]),
            8,
        )
        .unwrap();
        let out = k_reciprocal_oracle(&input).unwrap();
        for v in 0..3 {
            assert_eq!(out.get(v).unwrap().len(), 2);
        }
        assert_eq!(k_reciprocal_sample(&input).unwrap(), out);
    }

    #[test]
    fn matches_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..50 {
            let n = rng.gen_range(2..=16);
            let d = [2, 4, 8][trial % 3];
            let k = [1, 3, 8][(trial / 3) % 3];
            let input = random_input(&mut rng, n, d, k);
            assert_eq!(
                k_reciprocal_sample(&input).unwrap(),
                k_reciprocal_oracle(&input).unwrap(),
                "trial {trial}"
            );
        }
    }

    #[test]
    fn k_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let base = random_input(&mut rng, 12, 4, 1);
            let mut prev: Option<SurrogatePositiveSet> = None;
            for k in 1..=6 {
                let input =
                    SamplerInput::new(base.visual.clone(), base.textual.clone(), k).unwrap();
                let out = k_reciprocal_sample(&input).unwrap();
                if let Some(prev) = &prev {
                    for (v, set) in prev.iter() {
                        for &t in set {
                            assert!(out.contains(v, t), "pair ({v},{t}) lost when k grew");
                        }
                    }
                }
                prev = Some(out);
            }
        }
    }

    #[test]
    fn reciprocity_holds_by_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let input = random_input(&mut rng, 16, 4, 3);
        let out = k_reciprocal_sample(&input).unwrap();
        let visual_slices: Vec<&[f64]> = input.visual.iter().map(|(_, e)| e.values()).collect();
        let textual_slices: Vec<&[f64]> = input.textual.iter().map(|(_, e)| e.values()).collect();
        for (v, set) in out.iter() {
            for &t in set {
                let kt = vecops::top_k_slices(
                    visual_slices[v],
                    &textual_slices,
                    input.k,
                    ZeroNormPolicy::Strict,
                )
                .unwrap();
                assert!(kt.contains(&t));
                let kv = vecops::top_k_slices(
                    textual_slices[t],
                    &visual_slices,
                    input.k,
                    ZeroNormPolicy::Strict,
                )
                .unwrap();
                assert!(kv.contains(&v));
            }
        }
    }

    #[test]
    fn scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let input = random_input(&mut rng, 10, 4, 3);
        let baseline = k_reciprocal_sample(&input).unwrap();
        let scaled_visual: Vec<(usize, Embedding)> = input
            .visual
            .iter()
            .enumerate()
            .map(|(i, (idx, e))| {
                let s = 0.5 + i as f64;
                (*idx, emb(&e.values().iter().map(|v| v * s).collect::<Vec<_>>()))
            })
            .collect();
        let scaled = SamplerInput::new(scaled_visual, input.textual.clone(), input.k).unwrap();
        assert_eq!(k_reciprocal_sample(&scaled).unwrap(), baseline);
    }

    #[test]
    fn duplicated_pools_self_match_with_k1() {
        // pairwise-distinct cosines so each item's nearest neighbor is its copy
        let vecs: Vec<Vec<f64>> = (0..6)
            .map(|i| {
                let angle = 0.1 + 0.23 * i as f64;
                vec![angle.cos(), angle.sin()]
            })
            .collect();
        let items: Vec<(usize, Embedding)> =
            vecs.iter().enumerate().map(|(i, v)| (i, emb(v))).collect();
        let input = SamplerInput::new(items.clone(), items, 1).unwrap();
        let out = k_reciprocal_sample(&input).unwrap();
        for v in 0..6 {
            assert_eq!(out.get(v).unwrap().iter().copied().collect::<Vec<_>>(), [v]);
        }
    }

    #[test]
    fn input_validation() {
        assert!(matches!(
            SamplerInput::new(vec![], indexed(&[&[1.0]]), 1),
            Err(Error::EmptyPool)
        ));
        assert!(SamplerInput::new(indexed(&[&[1.0]]), indexed(&[&[1.0]]), 0).is_err());
    }

    #[test]
    fn positive_pairs_same_id_and_dedup() {
        let no_surrogates = SurrogatePositiveSet::default();
        let ids = [Some(1), Some(2)];
        let pairs = build_positive_pairs(&ids, &ids, &no_surrogates);
        assert_eq!(
            pairs,
            vec![
                PositivePair {
                    visual: 0,
                    textual: 0,
                    provenance: PairProvenance::SameId
                },
                PositivePair {
                    visual: 1,
                    textual: 1,
                    provenance: PairProvenance::SameId
                },
            ]
        );

        // surrogate across identities is kept as surrogate
        let mut map = BTreeMap::new();
        map.insert(0usize, BTreeSet::from([1usize]));
        let surrogates = SurrogatePositiveSet { map };
        let pairs = build_positive_pairs(&ids, &ids, &surrogates);
        assert!(pairs.contains(&PositivePair {
            visual: 0,
            textual: 1,
            provenance: PairProvenance::Surrogate
        }));

        // surrogate that is also same-id collapses to same-id
        let mut map = BTreeMap::new();
        map.insert(0usize, BTreeSet::from([0usize]));
        let surrogates = SurrogatePositiveSet { map };
        let pairs = build_positive_pairs(&ids, &ids, &surrogates);
        let found: Vec<_> = pairs.iter().filter(|p| p.visual == 0 && p.textual == 0).collect();
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].provenance, PairProvenance::SameId);
    }

    #[test]
    fn positive_pairs_skip_absent_items() {
        let visual_ids = [Some(1), None];
        let textual_ids = [Some(1), Some(1)];
        let pairs = build_positive_pairs(&visual_ids, &textual_ids, &SurrogatePositiveSet::default());
        assert_eq!(pairs.len(), 2);
        assert!(pairs.iter().all(|p| p.visual == 0));
    }
}
