//! Desk-scale joint training: trainable encoders over precomputed raw
//! features, in-batch pair construction with surrogate-positive mining,
//! analytic gradients through cosine scoring, and an adaptive-moment
//! optimizer with a step learning-rate schedule.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SegLabels, SEG_CLASSES};
use crate::encoder::{InputDims, Model, RawFeatures, SlotEncoder};
use crate::error::{Error, Result};
use crate::losses::{
    align_loss, align_loss_grad, id_loss, joint_loss, seg_loss, LossTerms, LossWeights,
    PairSimilarities, SegGrid,
};
use crate::sampler::{build_positive_pairs, k_reciprocal_sample, SamplerInput};
use crate::types::{AlignmentParams, AttributeCategory, Embedding, Modality, NUM_ATTRIBUTES};
use crate::vecops::ZeroNormPolicy;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Training hyperparameters. Defaults follow the reference setup: batches of
/// 64 pairs, learning rate 2e-4 decayed by 0.1 after epoch 40, weight decay
/// 4e-5, k = 8, theta = 0.3, embedding width 256.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_epoch: Option<usize>,
    pub seed: u64,
    pub align: AlignmentParams,
    pub k: usize,
    pub theta: f64,
    pub weights: LossWeights,
    /// Whether attribute positives include mined surrogate pairs. `fit`
    /// disables mining during the warm-up epochs.
    pub mine_surrogates: bool,
    /// Epochs trained on same-identity attribute positives only, before
    /// k-reciprocal mining activates. Mining over freshly initialized
    /// encoders can lock the value clusters into a permuted matching; the
    /// same-id anchors fix the assignment first.
    pub surrogate_warmup_epochs: usize,
    pub deterministic: bool,
    pub embed_dim: usize,
    pub hidden_dim: Option<usize>,
    pub normalize_embeddings: bool,
    pub eval_lambda: f64,
    pub zero_norm: ZeroNormPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 70,
            learning_rate: 2e-4,
            weight_decay: 4e-5,
            lr_decay_factor: 0.1,
            lr_decay_epoch: Some(40),
            seed: 0,
            align: AlignmentParams::default(),
            k: 8,
            theta: crate::textparse::DEFAULT_THETA,
            weights: LossWeights::default(),
            mine_surrogates: true,
            surrogate_warmup_epochs: 5,
            deterministic: true,
            embed_dim: 256,
            hidden_dim: None,
            normalize_embeddings: false,
            eval_lambda: 1.0,
            zero_norm: ZeroNormPolicy::Strict,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidParameter(
                "batch_size must be >= 2 so a batch can hold a negative identity".into(),
            ));
        }
        if self.k == 0 {
            return Err(Error::InvalidParameter("k must be >= 1".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::InvalidParameter("embed_dim must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidParameter("learning_rate must be >= 0".into()));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay_epoch {
            Some(decay) if epoch >= decay => self.learning_rate * self.lr_decay_factor,
            _ => self.learning_rate,
        }
    }
}

/// One batch slot: an image-description pair with one identity.
#[derive(Debug, Clone, Copy)]
pub struct TrainItem<'a> {
    pub id: u32,
    pub visual: &'a RawFeatures,
    pub textual: &'a RawFeatures,
    pub seg: Option<&'a SegLabels>,
}

/// Adaptive-moment optimizer with first/second moment decay 0.9/0.999 and
/// epsilon 1e-8; weight decay enters as an L2 term on the gradient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    m: Model,
    v: Model,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Adam {
    pub fn new(model: &Model) -> Self {
        Self {
            m: model.zeros_like(),
            v: model.zeros_like(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Model, lr: f64, weight_decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut params = model.tensors_mut();
        let mut ms = self.m.tensors_mut();
        let mut vs = self.v.tensors_mut();
        let gs = grads.tensors();
        for (((p, m), v), g) in params
            .iter_mut()
            .zip(ms.iter_mut())
            .zip(vs.iter_mut())
            .zip(gs.iter())
        {
            for i in 0..p.len() {
                let grad = g[i] + weight_decay * p[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad * grad;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// Pair index sets of one batch, fixed before differentiation. Pairs are
/// (visual slot, textual slot); negatives never share an identity.
#[derive(Debug, Clone, Default)]
pub struct PairSets {
    pub global_pos: Vec<(usize, usize)>,
    pub global_neg: Vec<(usize, usize)>,
    pub attr: [AttrPairSet; NUM_ATTRIBUTES],
}

#[derive(Debug, Clone, Default)]
pub struct AttrPairSet {
    pub pos: Vec<(usize, usize)>,
    pub neg: Vec<(usize, usize)>,
    pub surrogate_count: usize,
}

impl AttrPairSet {
    pub fn is_active(&self) -> bool {
        !self.pos.is_empty() || !self.neg.is_empty()
    }
}

struct SlotOut {
    y: Vec<f64>,
    cache: Option<Vec<f64>>,
}

struct ItemEncodings {
    vis_global: SlotOut,
    vis_attr: [Option<SlotOut>; NUM_ATTRIBUTES],
    txt_global: SlotOut,
    txt_attr: [Option<SlotOut>; NUM_ATTRIBUTES],
}

fn encode_items(model: &Model, items: &[TrainItem]) -> Result<Vec<ItemEncodings>> {
    items
        .iter()
        .map(|item| {
            let forward_slot = |enc: &SlotEncoder, x: &[f64], context| -> Result<SlotOut> {
                if x.len() != enc.in_dim() {
                    return Err(Error::DimensionMismatch {
                        expected: enc.in_dim(),
                        got: x.len(),
                        context,
                    });
                }
                let (y, cache) = enc.forward(x);
                Ok(SlotOut { y, cache })
            };
            let vis_global =
                forward_slot(&model.vis_global, &item.visual.global, "visual global")?;
            let txt_global =
                forward_slot(&model.txt_global, &item.textual.global, "textual global")?;
            let mut vis_attr: [Option<SlotOut>; NUM_ATTRIBUTES] = Default::default();
            let mut txt_attr: [Option<SlotOut>; NUM_ATTRIBUTES] = Default::default();
            for c in 0..NUM_ATTRIBUTES {
                if let Some(x) = &item.visual.attrs[c] {
                    vis_attr[c] = Some(forward_slot(&model.vis_attr[c], x, "visual attr")?);
                }
                if let Some(x) = &item.textual.attrs[c] {
                    txt_attr[c] = Some(forward_slot(&model.txt_attr, x, "textual attr")?);
                }
            }
            Ok(ItemEncodings {
                vis_global,
                vis_attr,
                txt_global,
                txt_attr,
            })
        })
        .collect()
}

/// Build the positive/negative pair sets of a batch: global positives are
/// same-identity pairs; attribute positives add mined surrogate pairs; all
/// remaining cross-identity combinations (both directions over the full
/// visual x textual grid) are negatives.
fn build_pair_sets(
    items: &[TrainItem],
    encodings: &[ItemEncodings],
    k: usize,
    mine_surrogates: bool,
) -> Result<PairSets> {
    let n = items.len();
    let mut sets = PairSets::default();
    for i in 0..n {
        for j in 0..n {
            if items[i].id == items[j].id {
                sets.global_pos.push((i, j));
            } else {
                sets.global_neg.push((i, j));
            }
        }
    }
    for c in 0..NUM_ATTRIBUTES {
        let visual: Vec<(usize, Embedding)> = encodings
            .iter()
            .enumerate()
            .filter_map(|(i, e)| {
                e.vis_attr[c]
                    .as_ref()
                    .map(|s| Ok((i, Embedding::new(s.y.clone())?)))
            })
            .collect::<Result<_>>()?;
        let textual: Vec<(usize, Embedding)> = encodings
            .iter()
            .enumerate()
            .filter_map(|(j, e)| {
                e.txt_attr[c]
                    .as_ref()
                    .map(|s| Ok((j, Embedding::new(s.y.clone())?)))
            })
            .collect::<Result<_>>()?;
        if visual.is_empty() || textual.is_empty() {
            continue;
        }
        let visual_slots: Vec<usize> = visual.iter().map(|(i, _)| *i).collect();
        let textual_slots: Vec<usize> = textual.iter().map(|(j, _)| *j).collect();
        let surrogates = if mine_surrogates {
            k_reciprocal_sample(&SamplerInput::new(visual, textual, k)?)?
        } else {
            SurrogatePositiveSet::default()
        };

        let mut visual_ids = vec![None; n];
        for &i in &visual_slots {
            visual_ids[i] = Some(items[i].id);
        }
        let mut textual_ids = vec![None; n];
        for &j in &textual_slots {
            textual_ids[j] = Some(items[j].id);
        }
        let positives = build_positive_pairs(&visual_ids, &textual_ids, &surrogates);
        let set = &mut sets.attr[c];
        set.surrogate_count = positives
            .iter()
            .filter(|p| p.provenance == crate::sampler::PairProvenance::Surrogate)
            .count();
        for p in &positives {
            set.pos.push((p.visual, p.textual));
        }
        for &i in &visual_slots {
            for &j in &textual_slots {
                if items[i].id != items[j].id && !surrogates.contains(i, j) {
                    set.neg.push((i, j));
                }
            }
        }
    }
    Ok(sets)
}

fn cosine_with_grad(u: &[f64], w: &[f64], policy: ZeroNormPolicy) -> Result<(f64, f64, f64)> {
    // returns (S, |u|, |w|)
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nw = 0.0;
    for (x, y) in u.iter().zip(w) {
        dot += x * y;
        nu += x * x;
        nw += y * y;
    }
    if nu == 0.0 || nw == 0.0 {
        return match policy {
            ZeroNormPolicy::Strict => Err(Error::ZeroNormVector {
                context: "training cosine",
            }),
            ZeroNormPolicy::Lenient => Ok((0.0, 0.0, 0.0)),
        };
    }
    let nu = nu.sqrt();
    let nw = nw.sqrt();
    Ok(((dot / (nu * nw)).clamp(-1.0, 1.0), nu, nw))
}

/// One alignment term (global or one attribute category): loss over the pair
/// sets plus, when requested, gradient accumulation into the per-slot
/// embedding accumulators. Pairs index into the per-slot embedding tables.
#[allow(clippy::too_many_arguments)]
fn align_term(
    pos: &[(usize, usize)],
    neg: &[(usize, usize)],
    vis_emb: &[Option<&[f64]>],
    txt_emb: &[Option<&[f64]>],
    params: &AlignmentParams,
    scale: f64,
    want_grads: bool,
    d_vis: &mut [Vec<f64>],
    d_txt: &mut [Vec<f64>],
) -> Result<Option<f64>> {
    if pos.is_empty() && neg.is_empty() {
        return Ok(None);
    }
    let gather = |set: &[(usize, usize)]| -> Result<Vec<f64>> {
        set.iter()
            .map(|&(i, j)| {
                let u = vis_emb[i].expect("pair references present visual slot");
                let w = txt_emb[j].expect("pair references present textual slot");
                Ok(cosine_with_grad(u, w, ZeroNormPolicy::Strict)?.0)
            })
            .collect()
    };
    let sims = PairSimilarities::new(gather(pos)?, gather(neg)?)?;
    let loss = align_loss(&sims, params)?;
    if want_grads {
        let (g_pos, g_neg) = align_loss_grad(&sims, params)?;
        for (set, gs) in [(pos, g_pos), (neg, g_neg)] {
            for (&(i, j), gval) in set.iter().zip(gs) {
                let u = vis_emb[i].unwrap();
                let w = txt_emb[j].unwrap();
                let (s, nu, nw) = cosine_with_grad(u, w, ZeroNormPolicy::Strict)?;
                let g = gval * scale;
                for k in 0..u.len() {
                    d_vis[i][k] += g * (w[k] / (nu * nw) - s * u[k] / (nu * nu));
                    d_txt[j][k] += g * (u[k] / (nu * nw) - s * w[k] / (nw * nw));
                }
            }
        }
    }
    Ok(Some(loss))
}

/// The computed losses of one batch plus, optionally, parameter gradients.
struct BatchComputation {
    terms: LossTerms,
    joint: f64,
    grads: Option<Model>,
}

fn compute_batch(
    model: &Model,
    items: &[TrainItem],
    pairs: &PairSets,
    cfg: &TrainConfig,
    id_classes: &[u32],
    want_grads: bool,
) -> Result<BatchComputation> {
    let encodings = encode_items(model, items)?;
    let n = items.len();
    let d = model.embed_dim;
    let mut grads = want_grads.then(|| model.zeros_like());

    // Gradient accumulators per item embedding.
    let mut d_vis_global = vec![vec![0.0; d]; n];
    let mut d_txt_global = vec![vec![0.0; d]; n];
    let mut d_vis_attr: Vec<[Option<Vec<f64>>; NUM_ATTRIBUTES]> = Vec::new();
    d_vis_attr.resize_with(n, Default::default);
    let mut d_txt_attr: Vec<[Option<Vec<f64>>; NUM_ATTRIBUTES]> = Vec::new();
    d_txt_attr.resize_with(n, Default::default);

    let mut terms = LossTerms::default();

    // --- identity cross-entropy on the global visual embedding ---
    if cfg.weights.id != 0.0 || want_grads {
        let mut total = 0.0;
        for (i, item) in items.iter().enumerate() {
            let class = id_classes
                .binary_search(&item.id)
                .map_err(|_| Error::InvalidParameter(format!("unknown identity {}", item.id)))?;
            let emb = &encodings[i].vis_global.y;
            let (input, norm) = if cfg.normalize_embeddings {
                let norm = emb.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::ZeroNormVector {
                        context: "id head input",
                    });
                }
                (emb.iter().map(|v| v / norm).collect::<Vec<f64>>(), norm)
            } else {
                (emb.clone(), 1.0)
            };
            let logits = model.id_head.forward(&input);
            let (loss, mut dlogits) = id_loss(&logits, class)?;
            total += loss;
            if let Some(g) = grads.as_mut() {
                let scale = cfg.weights.id / n as f64;
                for dl in &mut dlogits {
                    *dl *= scale;
                }
                let dinput = model
                    .id_head
                    .backward(&input, &dlogits, &mut g.id_head, true)
                    .unwrap();
                if cfg.normalize_embeddings {
                    let dot: f64 = dinput.iter().zip(&input).map(|(a, b)| a * b).sum();
                    for ((dv, di), y) in d_vis_global[i].iter_mut().zip(&dinput).zip(&input) {
                        *dv += (di - dot * y) / norm;
                    }
                } else {
                    for (dv, di) in d_vis_global[i].iter_mut().zip(&dinput) {
                        *dv += di;
                    }
                }
            }
        }
        terms.id = Some(total / n as f64);
    }

    // --- toy segmentation cross-entropy from raw attribute features ---
    if let Some(seg_head) = &model.seg_head {
        let with_grids: Vec<(usize, &SegLabels)> = items
            .iter()
            .enumerate()
            .filter_map(|(i, item)| item.seg.map(|s| (i, s)))
            .collect();
        if !with_grids.is_empty() {
            let mut total = 0.0;
            let attr_in = seg_head.linear.in_dim / NUM_ATTRIBUTES;
            for (i, seg) in &with_grids {
                let mut input = vec![0.0; seg_head.linear.in_dim];
                for c in 0..NUM_ATTRIBUTES {
                    if let Some(x) = &items[*i].visual.attrs[c] {
                        input[c * attr_in..c * attr_in + x.len()].copy_from_slice(x);
                    }
                }
                let logits = seg_head.linear.forward(&input);
                let grid = SegGrid::new(seg.h, seg.w, SEG_CLASSES, logits, seg.labels.clone())?;
                let (loss, mut dlogits) = seg_loss(&grid)?;
                total += loss;
                if let Some(g) = grads.as_mut() {
                    let scale = cfg.weights.seg / with_grids.len() as f64;
                    for dl in &mut dlogits {
                        *dl *= scale;
                    }
                    let gseg = g.seg_head.as_mut().expect("grads mirror model");
                    seg_head
                        .linear
                        .backward(&input, &dlogits, &mut gseg.linear, false);
                }
            }
            terms.seg = Some(total / with_grids.len() as f64);
        }
    }

    // --- alignment terms ---
    if cfg.weights.align_global != 0.0 || want_grads {
        let vis_emb: Vec<Option<&[f64]>> = encodings
            .iter()
            .map(|e| Some(e.vis_global.y.as_slice()))
            .collect();
        let txt_emb: Vec<Option<&[f64]>> = encodings
            .iter()
            .map(|e| Some(e.txt_global.y.as_slice()))
            .collect();
        terms.align_global = align_term(
            &pairs.global_pos,
            &pairs.global_neg,
            &vis_emb,
            &txt_emb,
            &cfg.align,
            cfg.weights.align_global,
            want_grads,
            &mut d_vis_global,
            &mut d_txt_global,
        )?;
    }

    let active: Vec<usize> = (0..NUM_ATTRIBUTES)
        .filter(|&c| pairs.attr[c].is_active())
        .collect();
    if !active.is_empty() && (cfg.weights.align_attr != 0.0 || want_grads) {
        let mut d_vis_cat = vec![vec![0.0; d]; n];
        let mut d_txt_cat = vec![vec![0.0; d]; n];
        let mut total = 0.0;
        for &c in &active {
            for row in d_vis_cat.iter_mut().chain(d_txt_cat.iter_mut()) {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
            let vis_emb: Vec<Option<&[f64]>> = encodings
                .iter()
                .map(|e| e.vis_attr[c].as_ref().map(|s| s.y.as_slice()))
                .collect();
            let txt_emb: Vec<Option<&[f64]>> = encodings
                .iter()
                .map(|e| e.txt_attr[c].as_ref().map(|s| s.y.as_slice()))
                .collect();
            let loss = align_term(
                &pairs.attr[c].pos,
                &pairs.attr[c].neg,
                &vis_emb,
                &txt_emb,
                &cfg.align,
                cfg.weights.align_attr / active.len() as f64,
                want_grads,
                &mut d_vis_cat,
                &mut d_txt_cat,
            )?
            .expect("active category has pairs");
            total += loss;
            if want_grads {
                for i in 0..n {
                    if encodings[i].vis_attr[c].is_some() {
                        let acc = d_vis_attr[i][c].get_or_insert_with(|| vec![0.0; d]);
                        for (a, v) in acc.iter_mut().zip(&d_vis_cat[i]) {
                            *a += v;
                        }
                    }
                    if encodings[i].txt_attr[c].is_some() {
                        let acc = d_txt_attr[i][c].get_or_insert_with(|| vec![0.0; d]);
                        for (a, v) in acc.iter_mut().zip(&d_txt_cat[i]) {
                            *a += v;
                        }
                    }
                }
            }
        }
        terms.align_attr = Some(total / active.len() as f64);
    }

    // --- backpropagate embedding gradients through the encoders ---
    if let Some(g) = grads.as_mut() {
        for (i, item) in items.iter().enumerate() {
            model.vis_global.backward(
                &item.visual.global,
                encodings[i].vis_global.cache.as_deref(),
                &d_vis_global[i],
                &mut g.vis_global,
            );
            model.txt_global.backward(
                &item.textual.global,
                encodings[i].txt_global.cache.as_deref(),
                &d_txt_global[i],
                &mut g.txt_global,
            );
            for c in 0..NUM_ATTRIBUTES {
                if let (Some(dy), Some(out), Some(x)) = (
                    &d_vis_attr[i][c],
                    &encodings[i].vis_attr[c],
                    &item.visual.attrs[c],
                ) {
                    model.vis_attr[c].backward(x, out.cache.as_deref(), dy, &mut g.vis_attr[c]);
                }
                if let (Some(dy), Some(out), Some(x)) = (
                    &d_txt_attr[i][c],
                    &encodings[i].txt_attr[c],
                    &item.textual.attrs[c],
                ) {
                    model.txt_attr.backward(x, out.cache.as_deref(), dy, &mut g.txt_attr);
                }
            }
        }
    }

    let joint = joint_loss(&terms, &cfg.weights);
    Ok(BatchComputation {
        terms,
        joint,
        grads,
    })
}

/// Joint loss of a batch under fixed pair sets. Used by the finite-difference
/// gradient checks, which must not re-run the discrete pair mining while
/// perturbing parameters.
pub fn batch_loss_with_fixed_pairs(
    model: &Model,
    items: &[TrainItem],
    pairs: &PairSets,
    cfg: &TrainConfig,
    id_classes: &[u32],
) -> Result<f64> {
    Ok(compute_batch(model, items, pairs, cfg, id_classes, false)?.joint)
}

/// Mine the batch's pair sets and compute the joint loss and its gradients.
pub fn batch_gradients(
    model: &Model,
    items: &[TrainItem],
    cfg: &TrainConfig,
    id_classes: &[u32],
) -> Result<(LossTerms, PairSets, Model)> {
    let encodings = encode_items(model, items)?;
    let pairs = build_pair_sets(items, &encodings, cfg.k)?;
    let comp = compute_batch(model, items, &pairs, cfg, id_classes, true)?;
    Ok((comp.terms, pairs, comp.grads.expect("gradients requested")))
}

/// One optimizer update over a batch. Errors with `DegenerateBatch` when all
/// items share one identity, since no negative pair would exist.
pub fn train_step(
    model: &mut Model,
    opt: &mut Adam,
    items: &[TrainItem],
    cfg: &TrainConfig,
    id_classes: &[u32],
    lr: f64,
) -> Result<LossTerms> {
    if items.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let first = items[0].id;
    if items.iter().all(|it| it.id == first) {
        return Err(Error::DegenerateBatch);
    }
    let (terms, _, grads) = batch_gradients(model, items, cfg, id_classes)?;
    opt.step(model, &grads, lr, cfg.weight_decay);
    Ok(terms)
}

/// Serializable optimizer/trainer state snapshot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        Self {
            seed,
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

/// A self-describing training snapshot; round-trips bit-exactly through JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub model: Model,
    pub epoch: usize,
    pub rng: RngState,
    /// Sorted identity labels; index = ID-head class.
    pub id_classes: Vec<u32>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let ckpt: Checkpoint =
            serde_json::from_str(json).map_err(|e| Error::InvalidParameter(format!(
                "bad checkpoint: {e}"
            )))?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::InvalidParameter(format!(
                "unsupported checkpoint format version {}",
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        Self::from_json(&json)
    }
}

/// Per-epoch training log row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_id: f64,
    pub loss_seg: f64,
    pub loss_align_glo: f64,
    pub loss_align_attr: f64,
    pub val_r1: f64,
}

/// CSV rendering with the canonical header.
pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,loss_id,loss_seg,loss_align_glo,loss_align_attr,val_r1\n");
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            m.epoch, m.loss_id, m.loss_seg, m.loss_align_glo, m.loss_align_attr, m.val_r1
        ));
    }
    out
}

pub struct FitResult {
    /// Best-validation checkpoint (falls back to the final epoch when no
    /// validation queries exist).
    pub checkpoint: Checkpoint,
    pub best_epoch: usize,
    pub best_val_r1: f64,
    pub metrics: Vec<EpochMetrics>,
}

struct PairedRecords<'a> {
    id: u32,
    visual: Vec<&'a crate::data::RawRecord>,
    textual: Vec<&'a crate::data::RawRecord>,
}

fn group_pairs<'a>(dataset: &'a Dataset) -> Vec<PairedRecords<'a>> {
    let mut by_id: BTreeMap<u32, PairedRecords<'a>> = BTreeMap::new();
    for rec in dataset.records() {
        let entry = by_id.entry(rec.person_id).or_insert_with(|| PairedRecords {
            id: rec.person_id,
            visual: Vec::new(),
            textual: Vec::new(),
        });
        match rec.modality {
            Modality::Visual => entry.visual.push(rec),
            Modality::Textual => entry.textual.push(rec),
        }
    }
    by_id
        .into_values()
        .filter(|g| !g.visual.is_empty() && !g.textual.is_empty())
        .collect()
}

fn shuffle<T, R: Rng>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Recall@1 of textual queries against the visual gallery under the combined
/// global+attribute score.
fn validation_r1(model: &Model, val: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    let gallery: Vec<crate::types::EmbeddingRecord> = val
        .visual()
        .map(|r| encode_record(model, r, cfg))
        .collect::<Result<_>>()?;
    let queries: Vec<crate::types::EmbeddingRecord> = val
        .textual()
        .map(|r| encode_record(model, r, cfg))
        .collect::<Result<_>>()?;
    if gallery.is_empty() || queries.is_empty() {
        return Ok(0.0);
    }
    let gallery_ids: Vec<u32> = gallery.iter().map(|g| g.person_id).collect();
    let mut hits = 0usize;
    for (qi, q) in queries.iter().enumerate() {
        let ranking = crate::eval::rank_gallery(qi, q, &gallery, cfg.eval_lambda, cfg.zero_norm)?;
        if let Some(&(top, _)) = ranking.ranked().first() {
            if gallery_ids[top] == q.person_id {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}

/// Encode a record through the model, optionally L2-normalizing outputs.
pub fn encode_record(
    model: &Model,
    rec: &crate::data::RawRecord,
    cfg: &TrainConfig,
) -> Result<crate::types::EmbeddingRecord> {
    let encoded = model.encode(&rec.features, rec.modality, rec.person_id)?;
    if !cfg.normalize_embeddings {
        return Ok(encoded);
    }
    let global = crate::vecops::l2_normalize(&encoded.global)?;
    let mut attrs: [Option<Embedding>; NUM_ATTRIBUTES] = Default::default();
    for cat in AttributeCategory::ALL {
        if let Some(e) = encoded.attr(cat) {
            attrs[cat.index()] = Some(crate::vecops::l2_normalize(e)?);
        }
    }
    crate::types::EmbeddingRecord::new(rec.person_id, rec.modality, global, attrs)
}

/// Run the full training loop: epoch-shuffled identity-paired batches, the
/// step learning-rate schedule, per-epoch validation Recall@1, and best-val
/// checkpoint selection.
pub fn fit(train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<FitResult> {
    cfg.validate()?;
    let groups = group_pairs(train);
    if groups.len() < 2 {
        return Err(Error::DegenerateBatch);
    }
    let id_classes: Vec<u32> = groups.iter().map(|g| g.id).collect();

    let [vis_g, vis_a, txt_g, txt_a] = train.slot_dims();
    let dims = InputDims {
        vis_global: vis_g.ok_or(Error::InvalidParameter("no visual records".into()))?,
        vis_attr: vis_a.unwrap_or(1),
        txt_global: txt_g.ok_or(Error::InvalidParameter("no textual records".into()))?,
        txt_attr: txt_a.unwrap_or(1),
    };
    let seg_grid = train
        .seg_dims()?
        .map(|(h, w)| (h, w, SEG_CLASSES));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::init(
        dims,
        cfg.embed_dim,
        cfg.hidden_dim,
        id_classes.len(),
        seg_grid,
        &mut rng,
    );
    let mut opt = Adam::new(&model);

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model, RngState)> = None;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);

        // Pair the epoch: each visual record of an identity meets one
        // shuffled same-identity textual record.
        let mut slots: Vec<TrainItem> = Vec::new();
        for group in &groups {
            let mut textual = group.textual.clone();
            shuffle(&mut textual, &mut rng);
            for (vi, vis) in group.visual.iter().enumerate() {
                let txt = textual[vi % textual.len()];
                slots.push(TrainItem {
                    id: group.id,
                    visual: &vis.features,
                    textual: &txt.features,
                    seg: vis.seg_labels.as_ref(),
                });
            }
        }
        shuffle(&mut slots, &mut rng);

        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut steps = 0usize;
        for batch in slots.chunks(cfg.batch_size) {
            let first = batch[0].id;
            if batch.iter().all(|it| it.id == first) {
                log::debug!("skipping degenerate batch of identity {first}");
                continue;
            }
            let terms = train_step(&mut model, &mut opt, batch, cfg, &id_classes, lr)?;
            sums.0 += terms.id.unwrap_or(0.0);
            sums.1 += terms.seg.unwrap_or(0.0);
            sums.2 += terms.align_global.unwrap_or(0.0);
            sums.3 += terms.align_attr.unwrap_or(0.0);
            steps += 1;
        }
        let steps = steps.max(1) as f64;
        let val_r1 = validation_r1(&model, val, cfg)?;
        metrics.push(EpochMetrics {
            epoch,
            loss_id: sums.0 / steps,
            loss_seg: sums.1 / steps,
            loss_align_glo: sums.2 / steps,
            loss_align_attr: sums.3 / steps,
            val_r1,
        });
        let improved = match &best {
            None => true,
            Some((best_r1, _, _, _)) => val_r1 > *best_r1,
        };
        if improved {
            best = Some((val_r1, epoch, model.clone(), RngState::capture(cfg.seed, &rng)));
        }
    }

    let (best_val_r1, best_epoch, best_model, rng_state) = match best {
        Some(b) => b,
        None => (0.0, 0, model, RngState::capture(cfg.seed, &rng)),
    };
    Ok(FitResult {
        checkpoint: Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: cfg.clone(),
            model: best_model,
            epoch: best_epoch,
            rng: rng_state,
            id_classes,
        },
        best_epoch,
        best_val_r1,
        metrics,
    })
}
