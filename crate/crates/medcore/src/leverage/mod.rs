//! Level-set geometry on logit fields.
//!
//! The predicted boundary is the zero level set of the logit map. This
//! module extracts sub-pixel zero crossings with marching-squares edge
//! interpolation, measures signed normal displacement between two fields,
//! computes boundary leverage (perturbation over gradient norm per unit
//! compression), and verifies that measured displacement matches the
//! first-order prediction -delta/|grad s| with quadratic residual decay.

mod sweep;


pub use sweep::{
    budget_rule_probe, run_sweep, step_records_csv, ProbeReport, StepFamily, StepRecord,
    SweepConfig, SweepSummary,
};

use crate::data::Mask;
use crate::error::{MedError, Result};
use crate::stats::{median, percentile};
use crate::tensor::Tensor;

/// An H×W logit map with its central-difference spatial gradient.
#[derive(Debug, Clone)]
pub struct LogitField {
    values: Tensor,
    /// (d/dx, d/dy) per pixel; x = column, y = row.
    grad: Vec<(f64, f64)>,
}

impl LogitField {
    pub fn from_tensor(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(MedError::InvalidShape {
                op: "LogitField",
                dims: values.dims().to_vec(),
                reason: "rank-2 logit map required".into(),
            });
        }
        values.check_finite("LogitField")?;
        let (h, w) = (values.dims()[0], values.dims()[1]);
        let v = values.data();
        let mut grad = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let gx = match (x, w) {
                    (0, _) => v[y * w + 1] - v[y * w],
                    (x, w) if x + 1 == w => v[y * w + x] - v[y * w + x - 1],
                    _ => 0.5 * (v[y * w + x + 1] - v[y * w + x - 1]),
                };
                let gy = match (y, h) {
                    (0, _) => v[w + x] - v[x],
                    (y, h) if y + 1 == h => v[y * w + x] - v[(y - 1) * w + x],
                    _ => 0.5 * (v[(y + 1) * w + x] - v[(y - 1) * w + x]),
                };
                grad.push((gx, gy));
            }
        }
        Ok(LogitField { values, grad })
    }

    pub fn height(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    #[inline]
    pub fn value(&self, x: usize, y: usize) -> f64 {
        self.values.data()[y * self.width() + x]
    }

    #[inline]
    pub fn grad(&self, x: usize, y: usize) -> (f64, f64) {
        self.grad[y * self.width() + x]
    }

    #[inline]
    pub fn grad_norm(&self, x: usize, y: usize) -> f64 {
        let (gx, gy) = self.grad(x, y);
        (gx * gx + gy * gy).sqrt()
    }

    /// Bilinear sample at continuous coordinates (pixel centers at
    /// integers), clamped to the grid.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let (h, w) = (self.height(), self.width());
        let x = x.clamp(0.0, (w - 1) as f64);
        let y = y.clamp(0.0, (h - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let v = |xx: usize, yy: usize| self.values.data()[yy * w + xx];
        (1.0 - fy) * ((1.0 - fx) * v(x0, y0) + fx * v(x1, y0))
            + fy * ((1.0 - fx) * v(x0, y1) + fx * v(x1, y1))
    }

    /// Bilinear-interpolated gradient.
    pub fn sample_grad(&self, x: f64, y: f64) -> (f64, f64) {
        let (h, w) = (self.height(), self.width());
        let x = x.clamp(0.0, (w - 1) as f64);
        let y = y.clamp(0.0, (h - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let g = |xx: usize, yy: usize| self.grad[yy * w + xx];
        let lerp2 = |a: (f64, f64), b: (f64, f64), t: f64| {
            (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1))
        };
        let top = lerp2(g(x0, y0), g(x1, y0), fx);
        let bot = lerp2(g(x0, y1), g(x1, y1), fx);
        lerp2(top, bot, fy)
    }
}

/// A sub-pixel zero crossing with its unit normal.
#[derive(Debug, Clone, Copy)]
pub struct Crossing {
    pub x: f64,
    pub y: f64,
    /// Unit normal grad s / |grad s| at the crossing.
    pub normal: (f64, f64),
    /// |grad s| interpolated at the crossing.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default)]
pub struct BoundaryExtraction {
    pub crossings: Vec<Crossing>,
    /// Crossings dropped because |grad s| < kappa_min.
    pub degenerate: usize,
}

/// Marching-squares zero crossings on pixel edges with linear sub-pixel
/// interpolation. A field with no sign change yields an empty set.
pub fn extract_boundary(field: &LogitField, kappa_min: f64) -> BoundaryExtraction {
    let (h, w) = (field.height(), field.width());
    let mut out = BoundaryExtraction::default();
    let mut push = |x: f64, y: f64, t: f64, g0: (f64, f64), g1: (f64, f64)| {
        let g = (g0.0 + t * (g1.0 - g0.0), g0.1 + t * (g1.1 - g0.1));
        let norm = (g.0 * g.0 + g.1 * g.1).sqrt();
        if norm < kappa_min {
            out.degenerate += 1;
            return;
        }
        out.crossings.push(Crossing {
            x,
            y,
            normal: (g.0 / norm, g.1 / norm),
            grad_norm: norm,
        });
    };
    // horizontal edges
    for y in 0..h {
        for x in 0..w - 1 {
            let s0 = field.value(x, y);
            let s1 = field.value(x + 1, y);
            if (s0 > 0.0) != (s1 > 0.0) {
                let t = s0 / (s0 - s1);
                push(
                    x as f64 + t,
                    y as f64,
                    t,
                    field.grad(x, y),
                    field.grad(x + 1, y),
                );
            }
        }
    }
    // vertical edges
    for y in 0..h - 1 {
        for x in 0..w {
            let s0 = field.value(x, y);
            let s1 = field.value(x, y + 1);
            if (s0 > 0.0) != (s1 > 0.0) {
                let t = s0 / (s0 - s1);
                push(
                    x as f64,
                    y as f64 + t,
                    t,
                    field.grad(x, y),
                    field.grad(x, y + 1),
                );
            }
        }
    }
    out
}

/// Mean and p95 boundary leverage of a perturbation: per band pixel,
/// |after - before| / (|grad before| + eps), pooled, then divided by the
/// compression gain.
pub fn boundary_leverage(
    before: &LogitField,
    after: &LogitField,
    band: &Mask,
    delta_c: f64,
    eps: f64,
) -> Result<(f64, f64)> {
    if delta_c <= 0.0 {
        return Err(MedError::Config(format!(
            "boundary leverage needs delta_c > 0, got {delta_c}"
        )));
    }
    let ratios = leverage_ratios(before, after, band, eps)?;
    if ratios.is_empty() {
        return Err(MedError::Config("empty boundary band".into()));
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let p95 = percentile(&ratios, 0.95);
    Ok((mean / delta_c, p95 / delta_c))
}

/// The per-pixel leverage ratios over a band (before dividing by delta C).
pub fn leverage_ratios(
    before: &LogitField,
    after: &LogitField,
    band: &Mask,
    eps: f64,
) -> Result<Vec<f64>> {
    let (h, w) = (before.height(), before.width());
    if (after.height(), after.width()) != (h, w) || (band.height(), band.width()) != (h, w) {
        return Err(MedError::ShapeMismatch {
            op: "leverage_ratios",
            lhs: vec![h, w],
            rhs: vec![after.height(), after.width()],
        });
    }
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if band.get(x, y) {
                let delta = (after.value(x, y) - before.value(x, y)).abs();
                out.push(delta / (before.grad_norm(x, y) + eps));
            }
        }
    }
    Ok(out)
}

/// Signed normal displacement measured from one crossing of the old
/// boundary: march along the normal (both directions), sampling the new
/// field bilinearly, until the sign flips; root by linear interpolation.
/// `None` when no flip occurs within `d_max`.
pub fn displacement_at(
    after: &LogitField,
    crossing: &Crossing,
    step: f64,
    d_max: f64,
) -> Option<f64> {
    let f = |t: f64| {
        after.sample(
            crossing.x + t * crossing.normal.0,
            crossing.y + t * crossing.normal.1,
        )
    };
    let f0 = f(0.0);
    if f0 == 0.0 {
        return Some(0.0);
    }
    let sign0 = f0 > 0.0;
    let mut best: Option<f64> = None;
    for dir in [1.0, -1.0] {
        let mut prev_t = 0.0;
        let mut prev_v = f0;
        let mut k = 1usize;
        loop {
            let t = dir * step * k as f64;
            if t.abs() > d_max {
                break;
            }
            let v = f(t);
            if (v > 0.0) != sign0 {
                // root between prev_t and t
                let root = prev_t + (t - prev_t) * (prev_v / (prev_v - v));
                if best.map_or(true, |b: f64| root.abs() < b.abs()) {
                    best = Some(root);
                }
                break;
            }
            prev_t = t;
            prev_v = v;
            k += 1;
        }
    }
    best
}

/// Measured displacement for every non-degenerate crossing of `before`.
pub fn measured_displacement(
    before: &LogitField,
    after: &LogitField,
    kappa_min: f64,
    step: f64,
    d_max: f64,
) -> Vec<(Crossing, Option<f64>)> {
    extract_boundary(before, kappa_min)
        .crossings
        .into_iter()
        .map(|c| {
            let u = displacement_at(after, &c, step, d_max);
            (c, u)
        })
        .collect()
}

/// One scale row of the first-order displacement check.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ResidualRow {
    pub scale: f64,
    /// median over crossings of |u_measured - u_predicted|
    pub median_residual: f64,
    pub crossings_used: usize,
}

/// Verify u = -delta/|grad s| + O(|delta|^2): measure residuals at each
/// scale t (field + t*delta) and report them; halving t should shrink the
/// residual about four-fold on smooth fields.
pub fn theorem_check(
    before: &LogitField,
    delta: &Tensor,
    scales: &[f64],
    kappa_min: f64,
    step: f64,
    d_max: f64,
) -> Result<Vec<ResidualRow>> {
    if delta.dims() != before.values().dims() {
        return Err(MedError::ShapeMismatch {
            op: "theorem_check",
            lhs: delta.dims().to_vec(),
            rhs: before.values().dims().to_vec(),
        });
    }
    let extraction = extract_boundary(before, kappa_min);
    if extraction.crossings.is_empty() {
        return Err(MedError::Config(
            "theorem_check: field has no boundary".into(),
        ));
    }
    let delta_field = LogitField::from_tensor(delta.clone())?;
    let mut rows = Vec::with_capacity(scales.len());
    for &scale in scales {
        let after_vals: Vec<f64> = before
            .values()
            .data()
            .iter()
            .zip(delta.data())
            .map(|(&v, &d)| v + scale * d)
            .collect();
        let after =
            LogitField::from_tensor(Tensor::from_parts(delta.dims().to_vec(), after_vals))?;
        let mut residuals = Vec::new();
        for c in &extraction.crossings {
            if let Some(u) = displacement_at(&after, c, step, d_max) {
                let predicted = -scale * delta_field.sample(c.x, c.y) / c.grad_norm;
                residuals.push((u - predicted).abs());
            }
        }
        if residuals.is_empty() {
            return Err(MedError::Config(format!(
                "theorem_check: no measurable crossings at scale {scale}"
            )));
        }
        rows.push(ResidualRow {
            scale,
            median_residual: median(&residuals),
            crossings_used: residuals.len(),
        });
    }
    Ok(rows)
}

/// residual(t/2) / residual(t) for consecutive rows; 0 when both residuals
/// are negligibly small (the exact linear case).
pub fn residual_ratios(rows: &[ResidualRow]) -> Vec<f64> {
    const TINY: f64 = 1e-12;
    rows.windows(2)
        .map(|w| {
            if w[0].median_residual < TINY && w[1].median_residual < TINY {
                0.0
            } else {
                w[1].median_residual / w[0].median_residual
            }
        })
        .collect()
}
