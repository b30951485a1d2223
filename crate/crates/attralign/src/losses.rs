//! Objective terms of the joint loss: the bounded logistic alignment loss
//! with analytic gradients, identity cross-entropy, and pixel-level
//! cross-entropy over toy segmentation grids.

use crate::error::{Error, Result};
use crate::types::AlignmentParams;

/// Cosine similarities of the positive and negative pairs of one batch.
#[derive(Debug, Clone, Default)]
pub struct PairSimilarities {
    s_pos: Vec<f64>,
    s_neg: Vec<f64>,
}

impl PairSimilarities {
    pub fn new(s_pos: Vec<f64>, s_neg: Vec<f64>) -> Result<Self> {
        for &s in s_pos.iter().chain(s_neg.iter()) {
            if !s.is_finite() || !(-1.0..=1.0).contains(&s) {
                return Err(Error::SimilarityOutOfRange { value: s });
            }
        }
        Ok(Self { s_pos, s_neg })
    }

    pub fn positives(&self) -> &[f64] {
        &self.s_pos
    }

    pub fn negatives(&self) -> &[f64] {
        &self.s_neg
    }

    pub fn is_empty(&self) -> bool {
        self.s_pos.is_empty() && self.s_neg.is_empty()
    }
}

/// log(1 + exp(x)) without overflow for large x.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// 1 / (1 + exp(x)) without overflow for large |x|.
fn inv_one_plus_exp(x: f64) -> f64 {
    if x > 0.0 {
        let e = (-x).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + x.exp())
    }
}

/// Alignment loss: positives are pushed above `alpha`, negatives below
/// `beta = alpha - margin`, each through a temperature-scaled logistic term.
/// Positives and negatives are averaged over their own counts.
pub fn align_loss(sims: &PairSimilarities, p: &AlignmentParams) -> Result<f64> {
    if sims.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    if !sims.s_pos.is_empty() {
        let sum: f64 = sims
            .s_pos
            .iter()
            .map(|&s| softplus(-p.tau_p() * (s - p.alpha())))
            .sum();
        total += sum / sims.s_pos.len() as f64;
    }
    if !sims.s_neg.is_empty() {
        let sum: f64 = sims
            .s_neg
            .iter()
            .map(|&s| softplus(p.tau_n() * (s - p.beta())))
            .sum();
        total += sum / sims.s_neg.len() as f64;
    }
    Ok(total)
}

/// Partial derivatives of [`align_loss`] with respect to each similarity:
/// `-tau_p / (1 + exp(tau_p (S+ - alpha))) / N_pos` per positive and
/// `tau_n / (1 + exp(tau_n (beta - S-))) / N_neg` per negative.
pub fn align_loss_grad(
    sims: &PairSimilarities,
    p: &AlignmentParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if sims.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n_pos = sims.s_pos.len().max(1) as f64;
    let n_neg = sims.s_neg.len().max(1) as f64;
    let g_pos = sims
        .s_pos
        .iter()
        .map(|&s| -p.tau_p() * inv_one_plus_exp(p.tau_p() * (s - p.alpha())) / n_pos)
        .collect();
    let g_neg = sims
        .s_neg
        .iter()
        .map(|&s| p.tau_n() * inv_one_plus_exp(p.tau_n() * (p.beta() - s)) / n_neg)
        .collect();
    Ok((g_pos, g_neg))
}

/// Softmax cross-entropy against a class index. Returns the loss and the
/// gradient `softmax(logits) - onehot(target)`.
pub fn id_loss(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::TargetOutOfRange {
            target,
            classes: logits.len(),
        });
    }
    let (loss, mut grad) = softmax_ce(logits, target);
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// Shared softmax helper: returns (cross-entropy loss, softmax probabilities).
fn softmax_ce(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    // loss via log-sum-exp, not ln(prob), to stay exact for saturated logits
    let lse = max + sum.ln();
    let loss = lse - logits[target];
    (loss, probs)
}

/// A toy segmentation problem: per-cell logits over `classes` channels and
/// integer labels, row-major.
#[derive(Debug, Clone)]
pub struct SegGrid {
    height: usize,
    width: usize,
    classes: usize,
    logits: Vec<f64>,
    labels: Vec<usize>,
}

impl SegGrid {
    pub fn new(
        height: usize,
        width: usize,
        classes: usize,
        logits: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || classes == 0 {
            return Err(Error::ShapeMismatch(format!(
                "grid dims must be positive, got {height}x{width}x{classes}"
            )));
        }
        if logits.len() != height * width * classes {
            return Err(Error::ShapeMismatch(format!(
                "expected {} logits, got {}",
                height * width * classes,
                logits.len()
            )));
        }
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "expected {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::ShapeMismatch(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            height,
            width,
            classes,
            logits,
            labels,
        })
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }
}

/// Mean over cells of softmax cross-entropy against the label grid.
/// The gradient has the same layout as the logits.
pub fn seg_loss(grid: &SegGrid) -> Result<(f64, Vec<f64>)> {
    let cells = grid.cells() as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; grid.logits.len()];
    for cell in 0..grid.cells() {
        let offset = cell * grid.classes;
        let logits = &grid.logits[offset..offset + grid.classes];
        let (loss, probs) = softmax_ce(logits, grid.labels[cell]);
        total += loss;
        for (c, &p) in probs.iter().enumerate() {
            grad[offset + c] = p / cells;
        }
        grad[offset + grid.labels[cell]] -= 1.0 / cells;
    }
    Ok((total / cells, grad))
}

/// The four objective terms of one batch. Absent terms contribute zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub id: Option<f64>,
    pub seg: Option<f64>,
    pub align_global: Option<f64>,
    pub align_attr: Option<f64>,
}

/// Per-term weights for ablations; the joint loss is the unweighted sum by
/// default.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub id: f64,
    pub seg: f64,
    pub align_global: f64,
    pub align_attr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            id: 1.0,
            seg: 1.0,
            align_global: 1.0,
            align_attr: 1.0,
        }
    }
}

/// Weighted sum of the available terms.
pub fn joint_loss(terms: &LossTerms, weights: &LossWeights) -> f64 {
    weights.id * terms.id.unwrap_or(0.0)
        + weights.seg * terms.seg.unwrap_or(0.0)
        + weights.align_global * terms.align_global.unwrap_or(0.0)
        + weights.align_attr * terms.align_attr.unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> AlignmentParams {
        AlignmentParams::default()
    }

    fn sims(pos: &[f64], neg: &[f64]) -> PairSimilarities {
        PairSimilarities::new(pos.to_vec(), neg.to_vec()).unwrap()
    }

    #[test]
    fn align_loss_midpoint_anchors() {
        // exponent exactly zero at S+ = alpha and S- = beta
        let p = params();
        let pos = align_loss(&sims(&[p.alpha()], &[]), &p).unwrap();
        assert!((pos - std::f64::consts::LN_2).abs() < 1e-9);
        let neg = align_loss(&sims(&[], &[p.beta()]), &p).unwrap();
        assert!((neg - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn align_loss_saturated_positive() {
        // single positive at S+ = 1: log(1 + e^-4)
        let p = params();
        let loss = align_loss(&sims(&[1.0], &[]), &p).unwrap();
        let expected = (-4.0f64).exp().ln_1p();
        assert!((loss - expected).abs() < 1e-15);
        assert!((loss - 0.0181499).abs() < 1e-7);
    }

    #[test]
    fn align_grad_midpoint_exact() {
        let p = params();
        let (g_pos, _) = align_loss_grad(&sims(&[p.alpha()], &[]), &p).unwrap();
        assert_eq!(g_pos[0], -5.0);
        let (_, g_neg) = align_loss_grad(&sims(&[], &[p.beta()]), &p).unwrap();
        assert_eq!(g_neg[0], 20.0);
    }

    #[test]
    fn align_loss_empty_batch() {
        let p = params();
        assert!(matches!(
            align_loss(&sims(&[], &[]), &p),
            Err(Error::EmptyBatch)
        ));
        assert!(matches!(
            align_loss_grad(&sims(&[], &[]), &p),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn align_loss_finite_at_extremes() {
        let p = params();
        for s in [-1.0, 1.0] {
            let loss = align_loss(&sims(&[s], &[s]), &p).unwrap();
            assert!(loss.is_finite());
            assert!(loss >= 0.0);
        }
        // tau_n = 40 at S- = 1 gives exponent 24; still finite
        let hot = align_loss(&sims(&[], &[1.0]), &p).unwrap();
        assert!(hot.is_finite());
        assert!((hot - 24.0).abs() < 1e-6);
    }

    #[test]
    fn align_grad_signs_and_informativeness() {
        let p = params();
        let mut prev_pos = f64::NEG_INFINITY;
        let mut prev_neg = 0.0;
        for i in 0..41 {
            let s = -1.0 + 0.05 * i as f64;
            let (g_pos, g_neg) = align_loss_grad(&sims(&[s], &[s]), &p).unwrap();
            assert!(g_pos[0] < 0.0, "positive gradient must be negative");
            assert!(g_neg[0] > 0.0, "negative gradient must be positive");
            // |dL/dS+| strictly decreasing in S+, |dL/dS-| strictly increasing in S-
            assert!(g_pos[0] > prev_pos, "at s={s}");
            assert!(g_neg[0] > prev_neg, "at s={s}");
            prev_pos = g_pos[0];
            prev_neg = g_neg[0];
        }
    }

    #[test]
    fn align_grad_matches_finite_difference() {
        // each side differentiated through its own term so the fd oracle
        // keeps full precision even where the other term dominates
        let p = params();
        let h = 1e-5;
        let inputs = [-0.95, -0.5, -0.123, 0.0, 0.2, 0.4, 0.6, 0.77, 0.95];
        for &s in &inputs {
            let (g_pos, _) = align_loss_grad(&sims(&[s], &[]), &p).unwrap();
            let up = align_loss(&sims(&[s + h], &[]), &p).unwrap();
            let dn = align_loss(&sims(&[s - h], &[]), &p).unwrap();
            let fd_pos = (up - dn) / (2.0 * h);
            assert!(
                (g_pos[0] - fd_pos).abs() / fd_pos.abs().max(1e-12) < 1e-4,
                "pos fd mismatch at {s}"
            );
            let (_, g_neg) = align_loss_grad(&sims(&[], &[s]), &p).unwrap();
            let up = align_loss(&sims(&[], &[s + h]), &p).unwrap();
            let dn = align_loss(&sims(&[], &[s - h]), &p).unwrap();
            let fd_neg = (up - dn) / (2.0 * h);
            assert!(
                (g_neg[0] - fd_neg).abs() / fd_neg.abs().max(1e-12) < 1e-4,
                "neg fd mismatch at {s}"
            );
        }
    }

    #[test]
    fn align_loss_monotone_in_sims() {
        let p = params();
        let mut prev = f64::INFINITY;
        for i in 0..=20 {
            let s = -1.0 + 0.1 * i as f64;
            let l = align_loss(&sims(&[s], &[]), &p).unwrap();
            assert!(l < prev, "loss must decrease as S+ grows");
            prev = l;
        }
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=20 {
            let s = -1.0 + 0.1 * i as f64;
            let l = align_loss(&sims(&[], &[s]), &p).unwrap();
            assert!(l > prev, "loss must increase as S- grows");
            prev = l;
        }
    }

    #[test]
    fn pair_similarities_validation() {
        assert!(PairSimilarities::new(vec![1.1], vec![]).is_err());
        assert!(PairSimilarities::new(vec![], vec![-1.2]).is_err());
        assert!(PairSimilarities::new(vec![f64::NAN], vec![]).is_err());
        assert!(PairSimilarities::new(vec![1.0, -1.0], vec![0.0]).is_ok());
    }

    #[test]
    fn id_loss_uniform_and_saturated() {
        let (loss, _) = id_loss(&[0.5; 4], 2).unwrap();
        assert!((loss - (4.0f64).ln()).abs() < 1e-12);

        let mut hot = vec![-30.0; 5];
        hot[3] = 30.0;
        let (loss, _) = id_loss(&hot, 3).unwrap();
        assert!(loss < 1e-9);

        let (loss, grad) = id_loss(&[1.0, 0.0], 1).unwrap();
        let expected = (1.0 + std::f64::consts::E).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 1.3132617).abs() < 1e-7);
        // gradient sums to zero: softmax - onehot
        assert!((grad.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn id_loss_target_out_of_range() {
        assert!(matches!(
            id_loss(&[0.0, 1.0], 2),
            Err(Error::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn id_loss_grad_finite_difference() {
        let logits = [0.3, -1.2, 2.0, 0.7];
        let (_, grad) = id_loss(&logits, 1).unwrap();
        let h = 1e-5;
        for i in 0..logits.len() {
            let mut up = logits;
            up[i] += h;
            let mut dn = logits;
            dn[i] -= h;
            let fd = (id_loss(&up, 1).unwrap().0 - id_loss(&dn, 1).unwrap().0) / (2.0 * h);
            assert!((grad[i] - fd).abs() / fd.abs().max(1e-8) < 1e-4);
        }
    }

    #[test]
    fn seg_loss_uniform_and_mean() {
        let grid = SegGrid::new(1, 1, 6, vec![0.0; 6], vec![2]).unwrap();
        let (loss, _) = seg_loss(&grid).unwrap();
        assert!((loss - (6.0f64).ln()).abs() < 1e-12);

        // saturated correct class
        let mut logits = vec![-30.0; 6];
        logits[2] = 30.0;
        let grid = SegGrid::new(1, 1, 6, logits, vec![2]).unwrap();
        assert!(seg_loss(&grid).unwrap().0 < 1e-9);

        // 2x1 grid: mean of per-pixel losses
        let l1 = vec![1.0, 0.0];
        let l2 = vec![0.0, 2.0];
        let g1 = SegGrid::new(1, 1, 2, l1.clone(), vec![0]).unwrap();
        let g2 = SegGrid::new(1, 1, 2, l2.clone(), vec![0]).unwrap();
        let combined = SegGrid::new(2, 1, 2, [l1, l2].concat(), vec![0, 0]).unwrap();
        let expected = (seg_loss(&g1).unwrap().0 + seg_loss(&g2).unwrap().0) / 2.0;
        assert!((seg_loss(&combined).unwrap().0 - expected).abs() < 1e-12);
    }

    #[test]
    fn seg_grid_shape_checks() {
        assert!(SegGrid::new(0, 1, 6, vec![], vec![]).is_err());
        assert!(SegGrid::new(1, 1, 6, vec![0.0; 5], vec![0]).is_err());
        assert!(SegGrid::new(1, 1, 6, vec![0.0; 6], vec![6]).is_err());
    }

    #[test]
    fn seg_loss_grad_finite_difference() {
        let logits = vec![0.1, -0.4, 0.9, 0.2, 1.3, -0.8, 0.0, 0.5, -0.2, 0.7, 0.3, -1.0];
        let labels = vec![2, 0];
        let grid = SegGrid::new(2, 1, 6, logits.clone(), labels.clone()).unwrap();
        let (_, grad) = seg_loss(&grid).unwrap();
        let h = 1e-5;
        for i in 0..logits.len() {
            let mut up = logits.clone();
            up[i] += h;
            let mut dn = logits.clone();
            dn[i] -= h;
            let lu = seg_loss(&SegGrid::new(2, 1, 6, up, labels.clone()).unwrap())
                .unwrap()
                .0;
            let ld = seg_loss(&SegGrid::new(2, 1, 6, dn, labels.clone()).unwrap())
                .unwrap()
                .0;
            let fd = (lu - ld) / (2.0 * h);
            assert!((grad[i] - fd).abs() < 1e-6, "component {i}");
        }
    }

    #[test]
    fn joint_loss_sums() {
        let w = LossWeights::default();
        assert_eq!(joint_loss(&LossTerms::default(), &w), 0.0);
        let only_id = LossTerms {
            id: Some(1.5),
            ..Default::default()
        };
        assert_eq!(joint_loss(&only_id, &w), 1.5);
        let all = LossTerms {
            id: Some(0.1),
            seg: Some(0.2),
            align_global: Some(0.3),
            align_attr: Some(0.4),
        };
        assert!((joint_loss(&all, &w) - 1.0).abs() < 1e-15);
    }
}
