//! Evaluation metrics on binary masks: Dice, IoU, Boundary F1, HD95.
//!
//! Boundary pixel sets are foreground pixels with at least one background
//! 4-neighbor (out of bounds counts as background). HD95 pools the
//! symmetric nearest boundary-to-boundary distances and takes the 95th
//! percentile with linear interpolation.

use crate::data::Mask;
use crate::stats::percentile;
use serde::Serialize;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MetricReport {
    pub dice: f64,
    pub iou: f64,
    pub bf1: f64,
    pub hd95: f64,
    /// True when either mask was empty and HD95 is the image-diagonal
    /// sentinel.
    pub hd95_degenerate: bool,
}

/// Standard Dice and IoU; both-empty masks score (1, 1).
pub fn dice_iou(pred: &Mask, gt: &Mask) -> (f64, f64) {
    assert_eq!(
        (pred.height(), pred.width()),
        (gt.height(), gt.width()),
        "mask shapes differ"
    );
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut g = 0usize;
    for y in 0..pred.height() {
        for x in 0..pred.width() {
            let a = pred.get(x, y);
            let b = gt.get(x, y);
            inter += (a && b) as usize;
            p += a as usize;
            g += b as usize;
        }
    }
    if p + g == 0 {
        return (1.0, 1.0);
    }
    let dice = 2.0 * inter as f64 / (p + g) as f64;
    let union = p + g - inter;
    let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    (dice, iou)
}

/// Foreground pixels touching background through a 4-neighbor (or the
/// image edge).
pub fn boundary_pixels(mask: &Mask) -> Vec<(i64, i64)> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let edge = x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || !mask.get(x - 1, y)
                || !mask.get(x + 1, y)
                || !mask.get(x, y - 1)
                || !mask.get(x, y + 1);
            if edge {
                out.push((x as i64, y as i64));
            }
        }
    }
    out
}

fn nearest_dist(p: (i64, i64), set: &[(i64, i64)]) -> f64 {
    let mut best = i64::MAX;
    for &(x, y) in set {
        let d = (p.0 - x) * (p.0 - x) + (p.1 - y) * (p.1 - y);
        best = best.min(d);
    }
    (best as f64).sqrt()
}

/// Boundary F1 with Euclidean match tolerance `tol` (pixels).
pub fn bf1(pred: &Mask, gt: &Mask, tol: f64) -> f64 {
    let pb = boundary_pixels(pred);
    let gb = boundary_pixels(gt);
    match (pb.is_empty(), gb.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let precision =
        pb.iter().filter(|&&p| nearest_dist(p, &gb) <= tol).count() as f64 / pb.len() as f64;
    let recall =
        gb.iter().filter(|&&g| nearest_dist(g, &pb) <= tol).count() as f64 / gb.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// 95th-percentile symmetric boundary distance. Returns the image
/// diagonal with the degenerate flag set when either mask is empty.
pub fn hd95(pred: &Mask, gt: &Mask) -> (f64, bool) {
    let diag = ((pred.height() * pred.height() + pred.width() * pred.width()) as f64).sqrt();
    if pred.is_all_false() || gt.is_all_false() {
        return (diag, true);
    }
    let pb = boundary_pixels(pred);
    let gb = boundary_pixels(gt);
    let mut pooled: Vec<f64> = Vec::with_capacity(pb.len() + gb.len());
    for &p in &pb {
        pooled.push(nearest_dist(p, &gb));
    }
    for &g in &gb {
        pooled.push(nearest_dist(g, &pb));
    }
    (percentile(&pooled, 0.95), false)
}

pub fn evaluate_mask_pair(pred: &Mask, gt: &Mask, tol: f64) -> MetricReport {
    let (dice, iou) = dice_iou(pred, gt);
    let b = bf1(pred, gt, tol);
    let (h, degenerate) = hd95(pred, gt);
    MetricReport {
        dice,
        iou,
        bf1: b,
        hd95: h,
        hd95_degenerate: degenerate,
    }
}

/// Macro average in sample order (deterministic reduction).
pub fn macro_average(reports: &[MetricReport]) -> MetricReport {
    assert!(!reports.is_empty(), "macro_average of no reports");
    let n = reports.len() as f64;
    MetricReport {
        dice: reports.iter().map(|r| r.dice).sum::<f64>() / n,
        iou: reports.iter().map(|r| r.iou).sum::<f64>() / n,
        bf1: reports.iter().map(|r| r.bf1).sum::<f64>() / n,
        hd95: reports.iter().map(|r| r.hd95).sum::<f64>() / n,
        hd95_degenerate: reports.iter().any(|r| r.hd95_degenerate),
    }
}
