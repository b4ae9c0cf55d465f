//! Supervision terms: density regression, patch classification, attention
//! consistency, and their weighted total.
//!
//! Reductions: density error is summed per image and averaged over images;
//! BCE is averaged over patches; attention consistency is averaged over
//! positions.

use serde::{Deserialize, Serialize};

use crate::autograd::{bce_mean, Var};
use crate::data::{DensityMap, PatchClassMap};
use crate::error::{Error, Result};
use crate::model::{AttentionScores, TrainForward};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_con: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 10.0,
            lambda_con: 10.0,
        }
    }
}

impl LossWeights {
    pub fn issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (k, v) in [("lambda_cls", self.lambda_cls), ("lambda_con", self.lambda_con)] {
            if !v.is_finite() || v < 0.0 {
                out.push(format!("loss.{k} = {v} must be finite and non-negative"));
            }
        }
        out
    }
}

/// Summed squared per-pixel error of one image.
pub fn density_loss(gt: &DensityMap, pred: &DensityMap) -> Result<f64> {
    density_loss_batch(std::slice::from_ref(gt), std::slice::from_ref(pred))
}

/// Per-image summed squared error, averaged over the batch.
pub fn density_loss_batch(gt: &[DensityMap], pred: &[DensityMap]) -> Result<f64> {
    if gt.is_empty() || gt.len() != pred.len() {
        return Err(Error::Shape(format!("{} targets vs {} predictions", gt.len(), pred.len())));
    }
    let mut total = 0.0;
    for (g, p) in gt.iter().zip(pred) {
        if (g.height, g.width) != (p.height, p.width) {
            return Err(Error::Shape(format!(
                "density shapes differ: {}x{} vs {}x{}",
                g.width, g.height, p.width, p.height
            )));
        }
        if g.scale != p.scale {
            return Err(Error::InvalidArgument(format!(
                "density scale mismatch: target {} vs prediction {}",
                g.scale, p.scale
            )));
        }
        total += g.values.iter().zip(&p.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(total / gt.len() as f64)
}

/// Mean binary cross-entropy over patches; `gt` must be binary.
pub fn pc_loss(gt: &PatchClassMap, pred: &PatchClassMap) -> Result<f64> {
    if (gt.rows, gt.cols) != (pred.rows, pred.cols) {
        return Err(Error::Shape(format!(
            "patch grids differ: {}x{} vs {}x{}",
            gt.rows, gt.cols, pred.rows, pred.cols
        )));
    }
    if !gt.is_binary() {
        return Err(Error::InvalidArgument("patch targets must be 0 or 1".into()));
    }
    Ok(bce_mean(&pred.values, &gt.values))
}

/// Mean over positions of the squared Euclidean distance between attention rows.
pub fn attention_consistency_loss(a_ori: &AttentionScores, a_aug: &AttentionScores) -> Result<f64> {
    if (a_ori.positions, a_ori.memory) != (a_aug.positions, a_aug.memory) {
        return Err(Error::Shape(format!(
            "attention shapes differ: {}x{} vs {}x{}",
            a_ori.positions, a_ori.memory, a_aug.positions, a_aug.memory
        )));
    }
    if a_ori.positions == 0 {
        return Ok(0.0);
    }
    let s: f64 = a_ori.values.iter().zip(&a_aug.values).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(s / a_ori.positions as f64)
}

/// Unweighted loss terms of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub den_ori: f64,
    pub den_aug: f64,
    pub cls_ori: f64,
    pub cls_aug: f64,
    pub con: f64,
}

impl LossParts {
    pub fn labeled(&self) -> [(&'static str, f64); 5] {
        [
            ("den_ori", self.den_ori),
            ("den_aug", self.den_aug),
            ("cls_ori", self.cls_ori),
            ("cls_aug", self.cls_aug),
            ("con", self.con),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub parts: LossParts,
}

/// `L = L_den^ori + L_den^aug + λ_cls (L_cls^ori + L_cls^aug) + λ_con L_con`.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in parts.labeled() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                term: name.to_string(),
                checkpoint: None,
            });
        }
    }
    let total = parts.den_ori
        + parts.den_aug
        + weights.lambda_cls * (parts.cls_ori + parts.cls_aug)
        + weights.lambda_con * parts.con;
    Ok(LossBreakdown { total, parts: *parts })
}

/// Targets shared by both streams of a pair batch.
#[derive(Clone, Debug)]
pub struct PairTargets {
    /// `[n, 1, H/8, W/8]` density at training scale.
    pub density: Tensor,
    /// `[n, 1, H/P, W/P]` binary patch labels.
    pub pcm: Tensor,
}

/// Attach every active loss term to the training graph and return the root.
/// Terms whose mechanism is switched off (or whose output is absent) are 0.
pub fn attach_losses(
    fwd: &mut TrainForward,
    targets: &PairTargets,
    weights: &LossWeights,
    use_acl: bool,
) -> Result<(Var, LossBreakdown)> {
    let n = fwd.n;
    let g = &mut fwd.graph;
    let dens_gt = Tensor::concat_batch(&[&targets.density, &targets.density]);
    if g.value(fwd.density).shape() != dens_gt.shape() {
        return Err(Error::Shape(format!(
            "density target {:?} does not match prediction {:?}",
            targets.density.shape(),
            g.value(fwd.density).shape()
        )));
    }
    let den_ori = g.density_loss(fwd.density, dens_gt.clone(), 0, n);
    let den_aug = g.density_loss(fwd.density, dens_gt, n, 2 * n);
    let mut terms = vec![(den_ori, 1.0), (den_aug, 1.0)];
    let mut parts = LossParts {
        den_ori: g.scalar(den_ori),
        den_aug: g.scalar(den_aug),
        ..LossParts::default()
    };
    if let Some(p) = fwd.pcm {
        let pcm_gt = Tensor::concat_batch(&[&targets.pcm, &targets.pcm]);
        if g.value(p).shape() != pcm_gt.shape() {
            return Err(Error::Shape(format!(
                "patch target {:?} does not match prediction {:?}",
                targets.pcm.shape(),
                g.value(p).shape()
            )));
        }
        let co = g.bce(p, pcm_gt.clone(), 0, n);
        let ca = g.bce(p, pcm_gt, n, 2 * n);
        parts.cls_ori = g.scalar(co);
        parts.cls_aug = g.scalar(ca);
        terms.push((co, weights.lambda_cls));
        terms.push((ca, weights.lambda_cls));
    }
    if let (Some(a), true) = (fwd.attn, use_acl) {
        let c = g.attn_consistency(a);
        parts.con = g.scalar(c);
        terms.push((c, weights.lambda_con));
    }
    let breakdown = total_loss(&parts, weights)?;
    let root = g.weighted_sum(terms);
    Ok((root, breakdown))
}
