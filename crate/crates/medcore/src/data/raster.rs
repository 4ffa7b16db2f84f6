//! Exact integer rasterization of the synthetic shape families.
//!
//! All geometry lives in eighth-pixel integer units and every
//! inside/outside decision is an integer inequality, so masks are
//! platform-independent. Pixel (x, y) is tested at its center,
//! (8x+4, 8y+4) in eighth units.

use super::{Mask, ShapeFamily};
use crate::rng::SplitMix64;

/// One eighth-pixel unit per integer step.
const SUB: i64 = 8;

/// Integer (cos, sin) × 256 at 24 evenly spaced angles. Baked in so vertex
/// placement never touches libm.
const DIRS: [(i64, i64); 24] = [
    (256, 0),
    (247, 66),
    (222, 128),
    (181, 181),
    (128, 222),
    (66, 247),
    (0, 256),
    (-66, 247),
    (-128, 222),
    (-181, 181),
    (-222, 128),
    (-247, 66),
    (-256, 0),
    (-247, -66),
    (-222, -128),
    (-181, -181),
    (-128, -222),
    (-66, -247),
    (0, -256),
    (66, -247),
    (128, -222),
    (181, -181),
    (222, -128),
    (247, -66),
];

#[derive(Debug, Clone, Copy)]
pub struct Ellipse {
    /// Center in eighth units.
    pub cx: i64,
    pub cy: i64,
    /// Semi-axes in eighth units.
    pub a: i64,
    pub b: i64,
}

impl Ellipse {
    #[inline]
    pub fn contains(&self, px: i64, py: i64) -> bool {
        let dx = (px - self.cx) as i128;
        let dy = (py - self.cy) as i128;
        let a2 = (self.a as i128) * (self.a as i128);
        let b2 = (self.b as i128) * (self.b as i128);
        dx * dx * b2 + dy * dy * a2 <= a2 * b2
    }
}

pub fn rasterize_ellipses(shapes: &[Ellipse], s: usize) -> Mask {
    Mask::from_fn(s, s, |x, y| {
        let px = SUB * x as i64 + SUB / 2;
        let py = SUB * y as i64 + SUB / 2;
        shapes.iter().any(|e| e.contains(px, py))
    })
}

/// Even-odd point-in-polygon with exact integer arithmetic.
/// Vertices in eighth units; the tested point uses pixel centers which sit
/// at odd half-steps, so ties with vertex rows resolve consistently.
fn polygon_contains(verts: &[(i64, i64)], px: i64, py: i64) -> bool {
    let mut inside = false;
    let n = verts.len();
    for i in 0..n {
        let (x1, y1) = verts[i];
        let (x2, y2) = verts[(i + 1) % n];
        if (y1 > py) != (y2 > py) {
            let lhs = (px - x1) as i128 * (y2 - y1) as i128;
            let rhs = (py - y1) as i128 * (x2 - x1) as i128;
            let crosses = if y2 > y1 { lhs < rhs } else { lhs > rhs };
            if crosses {
                inside = !inside;
            }
        }
    }
    inside
}

pub fn rasterize_polygon(verts: &[(i64, i64)], s: usize) -> Mask {
    Mask::from_fn(s, s, |x, y| {
        let px = SUB * x as i64 + SUB / 2;
        let py = SUB * y as i64 + SUB / 2;
        polygon_contains(verts, px, py)
    })
}

fn sample_ellipse(s: usize, rng: &mut SplitMix64, scale: f64) -> Ellipse {
    let s8 = (s as i64) * SUB;
    let lo = s8 / 4;
    let hi = 3 * s8 / 4;
    let cx = lo + rng.next_below((hi - lo) as u64) as i64;
    let cy = lo + rng.next_below((hi - lo) as u64) as i64;
    let amin = (s8 as f64 * 0.10 * scale) as i64;
    let amax = (s8 as f64 * 0.30 * scale) as i64;
    let a = amin + rng.next_below((amax - amin).max(1) as u64) as i64;
    let b = amin + rng.next_below((amax - amin).max(1) as u64) as i64;
    Ellipse { cx, cy, a: a.max(SUB), b: b.max(SUB) }
}

pub fn sample_shape(family: ShapeFamily, s: usize, rng: &mut SplitMix64) -> Mask {
    match family {
        ShapeFamily::CrispEllipse | ShapeFamily::TexturedEllipse => {
            rasterize_ellipses(&[sample_ellipse(s, rng, 1.0)], s)
        }
        ShapeFamily::LowContrastBlob => {
            let first = sample_ellipse(s, rng, 0.8);
            let extra = 1 + rng.next_below(2) as usize;
            let mut shapes = vec![first];
            for _ in 0..extra {
                let mut e = sample_ellipse(s, rng, 0.55);
                // pull satellites toward the first ellipse so the blob is connected
                e.cx = (e.cx + 2 * first.cx) / 3;
                e.cy = (e.cy + 2 * first.cy) / 3;
                shapes.push(e);
            }
            rasterize_ellipses(&shapes, s)
        }
        ShapeFamily::RaggedPolygon => {
            let s8 = (s as i64) * SUB;
            let lo = s8 * 3 / 8;
            let hi = s8 * 5 / 8;
            let cx = lo + rng.next_below((hi - lo) as u64) as i64;
            let cy = lo + rng.next_below((hi - lo) as u64) as i64;
            let k = 7 + rng.next_below(5) as usize;
            let rmin = s8 / 8;
            let rmax = s8 / 3;
            let offset = rng.next_below(DIRS.len() as u64) as usize;
            let verts: Vec<(i64, i64)> = (0..k)
                .map(|j| {
                    let di = (offset + j * DIRS.len() / k) % DIRS.len();
                    let (dx, dy) = DIRS[di];
                    let r = rmin + rng.next_below((rmax - rmin) as u64) as i64;
                    (cx + r * dx / 256, cy + r * dy / 256)
                })
                .collect();
            rasterize_polygon(&verts, s)
        }
    }
}
