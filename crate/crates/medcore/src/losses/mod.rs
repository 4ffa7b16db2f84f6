//! Differentiable segmentation losses, built on an existing tape.
//!
//! - `seg_loss`: soft Dice loss plus mean BCE on the logits.
//! - `boundary_loss`: BCE reweighted by (1 + lambda_bd) on the boundary
//!   band B(M), Dice term unweighted.
//! - `recovery_loss`: seg loss plus boundary BCE, feature distillation,
//!   boundary-region logit distillation, and a high-frequency penalty.
//!
//! BCE is computed in logit space as softplus(z) - z*y, which is exact
//! and saturates gracefully for large |z|.

#[cfg(test)]
mod tests;

use crate::data::{boundary_map, Mask};
use crate::error::Result;
use crate::tensor::{NodeId, Tape, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Boundary BCE weight lambda_bd.
    pub lambda_bd: f64,
    /// Recovery weights lambda_1..lambda_4.
    pub l1_bd: f64,
    pub l2_feat: f64,
    pub l3_logit: f64,
    pub l4_freq: f64,
    /// Dice smoothing epsilon_d.
    pub dice_eps: f64,
    /// Boundary band width for loss terms.
    pub band_width: usize,
    /// Scalar normalizer on the boundary-weighted BCE term.
    pub bce_scale: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_bd: 2.0,
            l1_bd: 1.0,
            l2_feat: 0.5,
            l3_logit: 0.5,
            l4_freq: 0.25,
            dice_eps: 1e-6,
            band_width: 3,
            bce_scale: 1.0,
        }
    }
}

fn check_logits(tape: &Tape, logits: NodeId, mask: &Mask) -> Result<()> {
    tape.check_finite(logits, "loss logits")?;
    let dims = tape.dims(logits);
    if dims != [mask.height(), mask.width()] {
        return Err(crate::error::MedError::ShapeMismatch {
            op: "loss(logits, mask)",
            lhs: dims.to_vec(),
            rhs: vec![mask.height(), mask.width()],
        });
    }
    Ok(())
}

/// Per-pixel binary cross-entropy map in logit space.
fn bce_map(t: &mut Tape, logits: NodeId, target: NodeId) -> Result<NodeId> {
    let sp = t.softplus(logits);
    let zy = t.mul(logits, target)?;
    t.sub(sp, zy)
}

/// Soft Dice loss: 1 - 2*sum(p*y) / (sum(p) + sum(y) + eps).
fn dice_loss(t: &mut Tape, logits: NodeId, target: NodeId, eps: f64) -> Result<NodeId> {
    let p = t.sigmoid(logits);
    let py = t.mul(p, target)?;
    let inter = t.sum(py);
    let num = t.scale(inter, 2.0);
    let ps = t.sum(p);
    let ys = t.sum(target);
    let denom_raw = t.add(ps, ys)?;
    let eps_c = t.constant(Tensor::scalar(eps));
    let denom = t.add(denom_raw, eps_c)?;
    let dice = t.div(num, denom)?;
    let one = t.constant(Tensor::scalar(1.0));
    t.sub(one, dice)
}

/// A loss node plus the values of its named components.
pub struct LossParts {
    pub node: NodeId,
    pub parts: Vec<(&'static str, f64)>,
}

/// Dice loss plus mean BCE.
pub fn seg_loss(t: &mut Tape, logits: NodeId, mask: &Mask, dice_eps: f64) -> Result<NodeId> {
    Ok(seg_loss_parts(t, logits, mask, dice_eps)?.node)
}

pub fn seg_loss_parts(
    t: &mut Tape,
    logits: NodeId,
    mask: &Mask,
    dice_eps: f64,
) -> Result<LossParts> {
    check_logits(t, logits, mask)?;
    let target = t.constant(mask.to_tensor());
    let dl = dice_loss(t, logits, target, dice_eps)?;
    let bce = bce_map(t, logits, target)?;
    let mean_bce = t.mean(bce);
    let node = t.add(dl, mean_bce)?;
    Ok(LossParts {
        node,
        parts: vec![
            ("dice", t.value(dl).scalar_value()),
            ("bce", t.value(mean_bce).scalar_value()),
        ],
    })
}

/// Boundary-weighted loss: pixels in the band B(M) get BCE weight
/// (1 + lambda_bd); with lambda_bd = 0 this reduces exactly to `seg_loss`.
pub fn boundary_loss(
    t: &mut Tape,
    logits: NodeId,
    mask: &Mask,
    weights: &LossWeights,
) -> Result<NodeId> {
    Ok(boundary_loss_parts(t, logits, mask, weights)?.node)
}

pub fn boundary_loss_parts(
    t: &mut Tape,
    logits: NodeId,
    mask: &Mask,
    weights: &LossWeights,
) -> Result<LossParts> {
    check_logits(t, logits, mask)?;
    let target = t.constant(mask.to_tensor());
    let dl = dice_loss(t, logits, target, weights.dice_eps)?;
    let bce = bce_map(t, logits, target)?;
    let weighted = weighted_bce_term(t, bce, mask, weights)?;
    let node = t.add(dl, weighted)?;
    Ok(LossParts {
        node,
        parts: vec![
            ("dice", t.value(dl).scalar_value()),
            ("weighted_bce", t.value(weighted).scalar_value()),
        ],
    })
}

/// sum((1 + lambda_bd * B) * bce) * bce_scale / (H*W)
fn weighted_bce_term(
    t: &mut Tape,
    bce: NodeId,
    mask: &Mask,
    weights: &LossWeights,
) -> Result<NodeId> {
    let (h, w) = (mask.height(), mask.width());
    let band = boundary_map(mask, weights.band_width);
    let wmap: Vec<f64> = (0..h * w)
        .map(|i| {
            if band.get(i % w, i / w) {
                1.0 + weights.lambda_bd
            } else {
                1.0
            }
        })
        .collect();
    let wc = t.constant(Tensor::from_parts(vec![h, w], wmap));
    let prod = t.mul(bce, wc)?;
    let total = t.sum(prod);
    Ok(t.scale(total, weights.bce_scale / (h * w) as f64))
}

/// Recovery objective: seg loss + l1 * boundary BCE + l2 * feature MSE
/// + l3 * boundary-band logit MSE + l4 * Laplacian-frequency penalty.
///
/// The teacher is the unpruned adapted model evaluated on the same sample;
/// the frequency target is the ground-truth mask.
#[allow(clippy::too_many_arguments)]
pub fn recovery_loss(
    t: &mut Tape,
    student_logits: NodeId,
    student_features: NodeId,
    teacher_logits: &Tensor,
    teacher_features: &Tensor,
    mask: &Mask,
    weights: &LossWeights,
) -> Result<NodeId> {
    Ok(recovery_loss_parts(
        t,
        student_logits,
        student_features,
        teacher_logits,
        teacher_features,
        mask,
        weights,
    )?
    .node)
}

#[allow(clippy::too_many_arguments)]
pub fn recovery_loss_parts(
    t: &mut Tape,
    student_logits: NodeId,
    student_features: NodeId,
    teacher_logits: &Tensor,
    teacher_features: &Tensor,
    mask: &Mask,
    weights: &LossWeights,
) -> Result<LossParts> {
    check_logits(t, student_logits, mask)?;
    if t.dims(student_features) != teacher_features.dims() {
        return Err(crate::error::MedError::ShapeMismatch {
            op: "recovery_loss(features)",
            lhs: t.dims(student_features).to_vec(),
            rhs: teacher_features.dims().to_vec(),
        });
    }
    let seg = seg_loss(t, student_logits, mask, weights.dice_eps)?;
    let mut loss = seg;
    let mut parts = vec![("seg", t.value(seg).scalar_value())];

    if weights.l1_bd != 0.0 {
        let target = t.constant(mask.to_tensor());
        let bce = bce_map(t, student_logits, target)?;
        let bd = weighted_bce_term(t, bce, mask, weights)?;
        let term = t.scale(bd, weights.l1_bd);
        parts.push(("bd", t.value(term).scalar_value()));
        loss = t.add(loss, term)?;
    } else {
        parts.push(("bd", 0.0));
    }

    if weights.l2_feat != 0.0 {
        let teach = t.constant(teacher_features.clone());
        let diff = t.sub(student_features, teach)?;
        let sq = t.square(diff);
        let mse = t.mean(sq);
        let term = t.scale(mse, weights.l2_feat);
        parts.push(("feat", t.value(term).scalar_value()));
        loss = t.add(loss, term)?;
    } else {
        parts.push(("feat", 0.0));
    }

    if weights.l3_logit != 0.0 {
        let band = boundary_map(mask, weights.band_width);
        let band_count = band.count().max(1);
        let band_map = t.constant(band.to_tensor());
        let teach = t.constant(teacher_logits.clone());
        let diff = t.sub(student_logits, teach)?;
        let sq = t.square(diff);
        let banded = t.mul(sq, band_map)?;
        let total = t.sum(banded);
        let term = t.scale(total, weights.l3_logit / band_count as f64);
        parts.push(("logit", t.value(term).scalar_value()));
        loss = t.add(loss, term)?;
    } else {
        parts.push(("logit", 0.0));
    }

    if weights.l4_freq != 0.0 {
        let prob = t.sigmoid(student_logits);
        let lap_p = t.laplacian(prob)?;
        let mask_t = mask.to_tensor();
        let lap_m = crate::tensor::laplacian_of(&mask_t);
        let lap_mc = t.constant(lap_m);
        let diff = t.sub(lap_p, lap_mc)?;
        let sq = t.square(diff);
        let mse = t.mean(sq);
        let term = t.scale(mse, weights.l4_freq);
        parts.push(("freq", t.value(term).scalar_value()));
        loss = t.add(loss, term)?;
    } else {
        parts.push(("freq", 0.0));
    }

    Ok(LossParts { node: loss, parts })
}
