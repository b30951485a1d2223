//! Finite-difference verification suites for every analytic gradient in the
//! crate, shared by the `grad-check` command and the acceptance tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{gen_synthetic, records_to_jsonl, Dataset, SyntheticSpec};
use crate::encoder::{InputDims, Model};
use crate::error::Result;
use crate::losses::{align_loss, align_loss_grad, id_loss, seg_loss, PairSimilarities, SegGrid};
use crate::textparse::TextPipeline;
use crate::trainer::{batch_gradients, batch_loss_with_fixed_pairs, TrainConfig, TrainItem};
use crate::types::AlignmentParams;

const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub checks: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub suites: Vec<SuiteReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed())
    }
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / fd.abs().max(analytic.abs()).max(1e-8)
}

/// Alignment-loss gradients against central differences over random
/// similarities and random valid parameter sets.
pub fn check_align_gradients(params_sets: usize, samples_per_set: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut max_err: f64 = 0.0;
    let mut checks = 0;
    for _ in 0..params_sets {
        let alpha: f64 = rng.gen_range(0.3..1.0);
        let margin = rng.gen_range(0.05..alpha * 0.9);
        let tau_p = rng.gen_range(1.0..20.0);
        let tau_n = rng.gen_range(1.0..50.0);
        let p = AlignmentParams::new(alpha, margin, tau_p, tau_n)?;
        for _ in 0..samples_per_set {
            let s: f64 = rng.gen_range(-0.999..0.999);
            // each side differentiated through its own term so the fd oracle
            // keeps full precision even where the other term dominates
            let pos_sims = PairSimilarities::new(vec![s], vec![])?;
            let (g_pos, _) = align_loss_grad(&pos_sims, &p)?;
            let pos_at = |sv: f64| -> Result<f64> {
                align_loss(&PairSimilarities::new(vec![sv], vec![])?, &p)
            };
            let fd_pos = (pos_at(s + FD_STEP)? - pos_at(s - FD_STEP)?) / (2.0 * FD_STEP);

            let neg_sims = PairSimilarities::new(vec![], vec![s])?;
            let (_, g_neg) = align_loss_grad(&neg_sims, &p)?;
            let neg_at = |sv: f64| -> Result<f64> {
                align_loss(&PairSimilarities::new(vec![], vec![sv])?, &p)
            };
            let fd_neg = (neg_at(s + FD_STEP)? - neg_at(s - FD_STEP)?) / (2.0 * FD_STEP);

            max_err = max_err.max(rel_err(g_pos[0], fd_pos));
            max_err = max_err.max(rel_err(g_neg[0], fd_neg));
            checks += 2;
        }
    }
    Ok(SuiteReport {
        name: "align_loss_grad",
        checks,
        max_rel_err: max_err,
        tolerance: 1e-4,
    })
}

/// Identity cross-entropy gradient against central differences.
pub fn check_id_gradients() -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut max_err: f64 = 0.0;
    let mut checks = 0;
    for _ in 0..50 {
        let classes = rng.gen_range(2..8);
        let logits: Vec<f64> = (0..classes).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let target = rng.gen_range(0..classes);
        let (_, grad) = id_loss(&logits, target)?;
        for i in 0..classes {
            let mut up = logits.clone();
            up[i] += FD_STEP;
            let mut dn = logits.clone();
            dn[i] -= FD_STEP;
            let fd = (id_loss(&up, target)?.0 - id_loss(&dn, target)?.0) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_err(grad[i], fd));
            checks += 1;
        }
    }
    Ok(SuiteReport {
        name: "id_loss_grad",
        checks,
        max_rel_err: max_err,
        tolerance: 1e-4,
    })
}

/// Segmentation cross-entropy gradient against central differences.
pub fn check_seg_gradients() -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut max_err: f64 = 0.0;
    let mut checks = 0;
    for _ in 0..10 {
        let (h, w, classes) = (3, 2, 6);
        let logits: Vec<f64> = (0..h * w * classes).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels: Vec<usize> = (0..h * w).map(|_| rng.gen_range(0..classes)).collect();
        let grid = SegGrid::new(h, w, classes, logits.clone(), labels.clone())?;
        let (_, grad) = seg_loss(&grid)?;
        for i in (0..logits.len()).step_by(3) {
            let mut up = logits.clone();
            up[i] += FD_STEP;
            let mut dn = logits.clone();
            dn[i] -= FD_STEP;
            let lu = seg_loss(&SegGrid::new(h, w, classes, up, labels.clone())?)?.0;
            let ld = seg_loss(&SegGrid::new(h, w, classes, dn, labels.clone())?)?.0;
            let fd = (lu - ld) / (2.0 * FD_STEP);
            // absolute comparison; per-cell gradients can be legitimately tiny
            if fd.abs() > 1e-6 || grad[i].abs() > 1e-6 {
                max_err = max_err.max(rel_err(grad[i], fd));
            }
            checks += 1;
        }
    }
    Ok(SuiteReport {
        name: "seg_loss_grad",
        checks,
        max_rel_err: max_err,
        tolerance: 1e-4,
    })
}

/// End-to-end encoder gradients of the joint loss on a small batch, holding
/// the mined pair sets fixed while differentiating.
pub fn check_encoder_gradients() -> Result<SuiteReport> {
    let pipeline = TextPipeline::embedded_default();
    let spec = SyntheticSpec {
        n_identities: 6,
        values_per_category: 3,
        noise_sigma: 0.1,
        records_per_identity: 1,
        d_in: 12,
        seed: 99,
    };
    let data = gen_synthetic(&spec)?;
    let train = Dataset::from_jsonl_str(&records_to_jsonl(&data.train), "gradcheck", &pipeline)?;

    let cfg = TrainConfig {
        embed_dim: 8,
        k: 2,
        batch_size: 4,
        ..Default::default()
    };
    let id_classes: Vec<u32> = train.identities().into_iter().collect();
    let [vg, va, tg, ta] = train.slot_dims();
    let dims = InputDims {
        vis_global: vg.unwrap(),
        vis_attr: va.unwrap(),
        txt_global: tg.unwrap(),
        txt_attr: ta.unwrap(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let model = Model::init(
        dims,
        cfg.embed_dim,
        None,
        id_classes.len(),
        Some((8, 4, crate::data::SEG_CLASSES)),
        &mut rng,
    );

    let visual: Vec<_> = train.visual().collect();
    let textual: Vec<_> = train.textual().collect();
    let items: Vec<TrainItem> = visual
        .iter()
        .take(4)
        .map(|v| {
            let t = textual
                .iter()
                .find(|t| t.person_id == v.person_id)
                .expect("paired record");
            TrainItem {
                id: v.person_id,
                visual: &v.features,
                textual: &t.features,
                seg: v.seg_labels.as_ref(),
            }
        })
        .collect();

    let (_, pairs, grads) = batch_gradients(&model, &items, &cfg, &id_classes)?;
    let mut probe = model.clone();
    let mut max_err: f64 = 0.0;
    let mut checks = 0;
    let n_tensors = probe.tensors().len();
    for t in 0..n_tensors {
        let len = probe.tensors()[t].len();
        let stride = (len / 40).max(1);
        for i in (0..len).step_by(stride) {
            probe.tensors_mut()[t][i] += FD_STEP;
            let up = batch_loss_with_fixed_pairs(&probe, &items, &pairs, &cfg, &id_classes)?;
            probe.tensors_mut()[t][i] -= 2.0 * FD_STEP;
            let dn = batch_loss_with_fixed_pairs(&probe, &items, &pairs, &cfg, &id_classes)?;
            probe.tensors_mut()[t][i] += FD_STEP;
            let fd = (up - dn) / (2.0 * FD_STEP);
            let g = grads.tensors()[t][i];
            if fd.abs() > 1e-7 || g.abs() > 1e-7 {
                max_err = max_err.max((g - fd).abs() / fd.abs().max(g.abs()).max(1e-6));
            }
            checks += 1;
        }
    }
    Ok(SuiteReport {
        name: "encoder_joint_loss_grad",
        checks,
        max_rel_err: max_err,
        tolerance: 1e-3,
    })
}

/// Run every suite.
pub fn run_grad_checks() -> Result<GradCheckReport> {
    Ok(GradCheckReport {
        suites: vec![
            check_align_gradients(10, 100)?,
            check_id_gradients()?,
            check_seg_gradients()?,
            check_encoder_gradients()?,
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        let report = run_grad_checks().unwrap();
        for suite in &report.suites {
            assert!(
                suite.passed(),
                "{}: max rel err {} over {} checks (tolerance {})",
                suite.name,
                suite.max_rel_err,
                suite.checks,
                suite.tolerance
            );
        }
    }
}
