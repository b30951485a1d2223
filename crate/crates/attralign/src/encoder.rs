//! Trainable toy encoders: one affine (optionally one-hidden-layer tanh) map
//! per slot, a linear identity-classification head, and a per-cell linear
//! segmentation head over raw attribute features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AttributeCategory, Embedding, EmbeddingRecord, Modality, NUM_ATTRIBUTES};

/// A dense layer, row-major weights (out_dim x in_dim).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearParams {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl LinearParams {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            w: vec![0.0; in_dim * out_dim],
            b: vec![0.0; out_dim],
        }
    }

    pub fn xavier<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let scale = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        Self {
            in_dim,
            out_dim,
            w,
            b: vec![0.0; out_dim],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut y = self.b.clone();
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            *yo += row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
        }
        y
    }

    /// Accumulate dW += dy x^T, db += dy; returns dx when requested.
    pub fn backward(
        &self,
        x: &[f64],
        dy: &[f64],
        grad: &mut LinearParams,
        want_dx: bool,
    ) -> Option<Vec<f64>> {
        for (o, &g) in dy.iter().enumerate() {
            let row = &mut grad.w[o * self.in_dim..(o + 1) * self.in_dim];
            for (wi, xi) in row.iter_mut().zip(x) {
                *wi += g * xi;
            }
            grad.b[o] += g;
        }
        if !want_dx {
            return None;
        }
        let mut dx = vec![0.0; self.in_dim];
        for (o, &g) in dy.iter().enumerate() {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            for (dxi, wi) in dx.iter_mut().zip(row) {
                *dxi += g * wi;
            }
        }
        Some(dx)
    }
}

/// One slot's encoder: affine, or affine-tanh-affine when a hidden width is
/// configured.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SlotEncoder {
    Linear(LinearParams),
    Mlp {
        hidden: LinearParams,
        output: LinearParams,
    },
}

impl SlotEncoder {
    pub fn init<R: Rng>(in_dim: usize, out_dim: usize, hidden: Option<usize>, rng: &mut R) -> Self {
        match hidden {
            None => SlotEncoder::Linear(LinearParams::xavier(in_dim, out_dim, rng)),
            Some(h) => SlotEncoder::Mlp {
                hidden: LinearParams::xavier(in_dim, h, rng),
                output: LinearParams::xavier(h, out_dim, rng),
            },
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            SlotEncoder::Linear(l) => SlotEncoder::Linear(LinearParams::zeros(l.in_dim, l.out_dim)),
            SlotEncoder::Mlp { hidden, output } => SlotEncoder::Mlp {
                hidden: LinearParams::zeros(hidden.in_dim, hidden.out_dim),
                output: LinearParams::zeros(output.in_dim, output.out_dim),
            },
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            SlotEncoder::Linear(l) => l.in_dim,
            SlotEncoder::Mlp { hidden, .. } => hidden.in_dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            SlotEncoder::Linear(l) => l.out_dim,
            SlotEncoder::Mlp { output, .. } => output.out_dim,
        }
    }

    /// Forward pass; the cache holds the post-tanh hidden activations needed
    /// for the backward pass of the MLP variant.
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, Option<Vec<f64>>) {
        match self {
            SlotEncoder::Linear(l) => (l.forward(x), None),
            SlotEncoder::Mlp { hidden, output } => {
                let mut h = hidden.forward(x);
                for v in &mut h {
                    *v = v.tanh();
                }
                let y = output.forward(&h);
                (y, Some(h))
            }
        }
    }

    pub fn backward(&self, x: &[f64], cache: Option<&[f64]>, dy: &[f64], grad: &mut SlotEncoder) {
        match (self, grad) {
            (SlotEncoder::Linear(l), SlotEncoder::Linear(g)) => {
                l.backward(x, dy, g, false);
            }
            (
                SlotEncoder::Mlp { hidden, output },
                SlotEncoder::Mlp {
                    hidden: gh,
                    output: go,
                },
            ) => {
                let h = cache.expect("mlp backward needs cached activations");
                let dh = output.backward(h, dy, go, true).unwrap();
                let dpre: Vec<f64> = dh
                    .iter()
                    .zip(h)
                    .map(|(d, hv)| d * (1.0 - hv * hv))
                    .collect();
                hidden.backward(x, &dpre, gh, false);
            }
            _ => panic!("gradient structure does not match encoder structure"),
        }
    }
}

/// Per-cell linear classifier over the concatenated raw attribute features.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegHead {
    pub grid_h: usize,
    pub grid_w: usize,
    pub classes: usize,
    pub linear: LinearParams,
}

/// All trainable parameters. The same struct doubles as the gradient and the
/// optimizer-moment container via [`Model::zeros_like`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub embed_dim: usize,
    pub vis_global: SlotEncoder,
    pub vis_attr: [SlotEncoder; NUM_ATTRIBUTES],
    pub txt_global: SlotEncoder,
    /// Textual attribute slots share one parameter set across categories.
    pub txt_attr: SlotEncoder,
    pub id_head: LinearParams,
    pub seg_head: Option<SegHead>,
}

/// Input dimensions the model is built around.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub vis_global: usize,
    pub vis_attr: usize,
    pub txt_global: usize,
    pub txt_attr: usize,
}

impl Model {
    pub fn init<R: Rng>(
        dims: InputDims,
        embed_dim: usize,
        hidden: Option<usize>,
        id_classes: usize,
        seg_grid: Option<(usize, usize, usize)>,
        rng: &mut R,
    ) -> Self {
        let vis_attr = std::array::from_fn(|_| {
            SlotEncoder::init(dims.vis_attr, embed_dim, hidden, rng)
        });
        Self {
            embed_dim,
            vis_global: SlotEncoder::init(dims.vis_global, embed_dim, hidden, rng),
            vis_attr,
            txt_global: SlotEncoder::init(dims.txt_global, embed_dim, hidden, rng),
            txt_attr: SlotEncoder::init(dims.txt_attr, embed_dim, hidden, rng),
            id_head: LinearParams::xavier(embed_dim, id_classes, rng),
            seg_head: seg_grid.map(|(h, w, classes)| SegHead {
                grid_h: h,
                grid_w: w,
                classes,
                linear: LinearParams::xavier(
                    dims.vis_attr * NUM_ATTRIBUTES,
                    h * w * classes,
                    rng,
                ),
            }),
        }
    }

    pub fn input_dims(&self) -> InputDims {
        InputDims {
            vis_global: self.vis_global.in_dim(),
            vis_attr: self.vis_attr[0].in_dim(),
            txt_global: self.txt_global.in_dim(),
            txt_attr: self.txt_attr.in_dim(),
        }
    }

    pub fn zeros_like(&self) -> Model {
        Model {
            embed_dim: self.embed_dim,
            vis_global: self.vis_global.zeros_like(),
            vis_attr: std::array::from_fn(|i| self.vis_attr[i].zeros_like()),
            txt_global: self.txt_global.zeros_like(),
            txt_attr: self.txt_attr.zeros_like(),
            id_head: LinearParams::zeros(self.id_head.in_dim, self.id_head.out_dim),
            seg_head: self.seg_head.as_ref().map(|s| SegHead {
                grid_h: s.grid_h,
                grid_w: s.grid_w,
                classes: s.classes,
                linear: LinearParams::zeros(s.linear.in_dim, s.linear.out_dim),
            }),
        }
    }

    /// Every parameter tensor in a fixed traversal order.
    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        collect_slot(&self.vis_global, &mut out);
        for slot in &self.vis_attr {
            collect_slot(slot, &mut out);
        }
        collect_slot(&self.txt_global, &mut out);
        collect_slot(&self.txt_attr, &mut out);
        out.push(&self.id_head.w);
        out.push(&self.id_head.b);
        if let Some(seg) = &self.seg_head {
            out.push(&seg.linear.w);
            out.push(&seg.linear.b);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        collect_slot_mut(&mut self.vis_global, &mut out);
        for slot in &mut self.vis_attr {
            collect_slot_mut(slot, &mut out);
        }
        collect_slot_mut(&mut self.txt_global, &mut out);
        collect_slot_mut(&mut self.txt_attr, &mut out);
        out.push(&mut self.id_head.w);
        out.push(&mut self.id_head.b);
        if let Some(seg) = &mut self.seg_head {
            out.push(&mut seg.linear.w);
            out.push(&mut seg.linear.b);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Encode one modality's raw features into an [`EmbeddingRecord`].
    pub fn encode(
        &self,
        features: &RawFeatures,
        modality: Modality,
        person_id: u32,
    ) -> Result<EmbeddingRecord> {
        let global_enc = match modality {
            Modality::Visual => &self.vis_global,
            Modality::Textual => &self.txt_global,
        };
        if features.global.len() != global_enc.in_dim() {
            return Err(Error::DimensionMismatch {
                expected: global_enc.in_dim(),
                got: features.global.len(),
                context: "global raw feature",
            });
        }
        let (global, _) = global_enc.forward(&features.global);
        let mut attrs: [Option<Embedding>; NUM_ATTRIBUTES] = Default::default();
        for cat in AttributeCategory::ALL {
            if let Some(raw) = &features.attrs[cat.index()] {
                let enc = match modality {
                    Modality::Visual => &self.vis_attr[cat.index()],
                    Modality::Textual => &self.txt_attr,
                };
                if raw.len() != enc.in_dim() {
                    return Err(Error::DimensionMismatch {
                        expected: enc.in_dim(),
                        got: raw.len(),
                        context: "attribute raw feature",
                    });
                }
                let (out, _) = enc.forward(raw);
                attrs[cat.index()] = Some(Embedding::new(out)?);
            }
        }
        EmbeddingRecord::new(person_id, modality, Embedding::new(global)?, attrs)
    }
}

fn collect_slot<'a>(slot: &'a SlotEncoder, out: &mut Vec<&'a Vec<f64>>) {
    match slot {
        SlotEncoder::Linear(l) => {
            out.push(&l.w);
            out.push(&l.b);
        }
        SlotEncoder::Mlp { hidden, output } => {
            out.push(&hidden.w);
            out.push(&hidden.b);
            out.push(&output.w);
            out.push(&output.b);
        }
    }
}

fn collect_slot_mut<'a>(slot: &'a mut SlotEncoder, out: &mut Vec<&'a mut Vec<f64>>) {
    match slot {
        SlotEncoder::Linear(l) => {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        SlotEncoder::Mlp { hidden, output } => {
            out.push(&mut hidden.w);
            out.push(&mut hidden.b);
            out.push(&mut output.w);
            out.push(&mut output.b);
        }
    }
}

/// Raw (pre-encoder) features of one record: a global vector plus optional
/// per-category vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFeatures {
    pub global: Vec<f64>,
    pub attrs: [Option<Vec<f64>>; NUM_ATTRIBUTES],
}

impl RawFeatures {
    pub fn global_only(global: Vec<f64>) -> Self {
        Self {
            global,
            attrs: Default::default(),
        }
    }

    pub fn present_mask(&self) -> [bool; NUM_ATTRIBUTES] {
        std::array::from_fn(|i| self.attrs[i].is_some())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> InputDims {
        InputDims {
            vis_global: 6,
            vis_attr: 4,
            txt_global: 5,
            txt_attr: 5,
        }
    }

    #[test]
    fn identity_linear_is_identity() {
        let mut l = LinearParams::zeros(3, 3);
        for i in 0..3 {
            l.w[i * 3 + i] = 1.0;
        }
        assert_eq!(l.forward(&[1.0, -2.0, 0.5]), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn encode_propagates_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Model::init(dims(), 8, None, 3, None, &mut rng);
        let mut features = RawFeatures::global_only(vec![0.1; 6]);
        features.attrs[1] = Some(vec![0.2; 4]);
        let rec = model.encode(&features, Modality::Visual, 7).unwrap();
        assert_eq!(rec.present_mask(), [false, true, false, false, false]);
        assert_eq!(rec.dim(), 8);
        assert_eq!(rec.person_id, 7);
    }

    #[test]
    fn encode_checks_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Model::init(dims(), 8, None, 3, None, &mut rng);
        let bad = RawFeatures::global_only(vec![0.1; 5]);
        assert!(model.encode(&bad, Modality::Visual, 0).is_err());
    }

    #[test]
    fn textual_attr_slots_share_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::init(dims(), 8, None, 3, None, &mut rng);
        let mut features = RawFeatures::global_only(vec![0.0; 5]);
        features.attrs[0] = Some(vec![0.3; 5]);
        features.attrs[4] = Some(vec![0.3; 5]);
        let rec = model.encode(&features, Modality::Textual, 0).unwrap();
        assert_eq!(
            rec.attr(AttributeCategory::Head).unwrap().values(),
            rec.attr(AttributeCategory::Bags).unwrap().values()
        );
    }

    #[test]
    fn linear_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = LinearParams::xavier(3, 2, &mut rng);
        let x = [0.4, -1.1, 0.7];
        // scalar objective: sum of outputs
        let mut grad = LinearParams::zeros(3, 2);
        let dy = [1.0, 1.0];
        let dx = l.backward(&x, &dy, &mut grad, true).unwrap();
        let h = 1e-6;
        let f = |l: &LinearParams, x: &[f64]| l.forward(x).iter().sum::<f64>();
        for i in 0..l.w.len() {
            let mut up = l.clone();
            up.w[i] += h;
            let mut dn = l.clone();
            dn.w[i] -= h;
            let fd = (f(&up, &x) - f(&dn, &x)) / (2.0 * h);
            assert!((grad.w[i] - fd).abs() < 1e-6);
        }
        for i in 0..3 {
            let mut xu = x;
            xu[i] += h;
            let mut xd = x;
            xd[i] -= h;
            let fd = (f(&l, &xu) - f(&l, &xd)) / (2.0 * h);
            assert!((dx[i] - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn mlp_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = SlotEncoder::init(3, 2, Some(4), &mut rng);
        let x = [0.9, -0.2, 0.5];
        let (y, cache) = enc.forward(&x);
        let dy = vec![1.0; y.len()];
        let mut grad = enc.zeros_like();
        enc.backward(&x, cache.as_deref(), &dy, &mut grad);
        let f = |e: &SlotEncoder| e.forward(&x).0.iter().sum::<f64>();
        let h = 1e-6;
        // perturb every tensor element and compare
        let mut probe = enc.clone();
        let n_tensors = match &probe {
            SlotEncoder::Mlp { .. } => 4,
            _ => unreachable!(),
        };
        for t in 0..n_tensors {
            let len = {
                let tensors = slot_tensors_mut(&mut probe);
                tensors[t].len()
            };
            for i in 0..len {
                {
                    let mut tensors = slot_tensors_mut(&mut probe);
                    tensors[t][i] += h;
                }
                let up = f(&probe);
                {
                    let mut tensors = slot_tensors_mut(&mut probe);
                    tensors[t][i] -= 2.0 * h;
                }
                let dn = f(&probe);
                {
                    let mut tensors = slot_tensors_mut(&mut probe);
                    tensors[t][i] += h;
                }
                let fd = (up - dn) / (2.0 * h);
                let g = slot_tensors(&grad)[t][i];
                assert!((g - fd).abs() < 1e-5, "tensor {t} elem {i}: {g} vs {fd}");
            }
        }
    }

    fn slot_tensors(slot: &SlotEncoder) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        collect_slot(slot, &mut out);
        out
    }

    fn slot_tensors_mut(slot: &mut SlotEncoder) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        collect_slot_mut(slot, &mut out);
        out
    }

    #[test]
    fn traversal_order_is_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = Model::init(dims(), 8, None, 3, Some((2, 2, 6)), &mut rng);
        let a: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
        let mut clone = model.clone();
        let b: Vec<usize> = clone.tensors_mut().iter().map(|t| t.len()).collect();
        assert_eq!(a, b);
        let zeros = model.zeros_like();
        let c: Vec<usize> = zeros.tensors().iter().map(|t| t.len()).collect();
        assert_eq!(a, c);
    }
}
