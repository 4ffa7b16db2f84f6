//! Deterministic synthetic segmentation tasks.
//!
//! One "base" distribution of crisp high-contrast ellipses plus a set of
//! "adapted" sub-distributions (low contrast, texture, ragged outlines)
//! whose boundary statistics differ from the base. All masks are
//! rasterized with exact integer inequality tests so the same seed yields
//! byte-identical samples on every platform; images use only arithmetic
//! the PRNG drives directly.

mod morphology;
mod raster;

pub use morphology::{boundary_map, dilate, erode};

use crate::error::{MedError, Result};
use crate::model::PromptBox;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Binary H×W mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Mask::new(h, w);
        for y in 0..h {
            for x in 0..w {
                m.data[y * w + x] = f(x, y);
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_all_false(&self) -> bool {
        self.data.iter().all(|&v| !v)
    }

    /// Tight bounding box (half-open), or None for an empty mask.
    pub fn tight_bbox(&self) -> Option<PromptBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (self.w, self.h, 0usize, 0usize);
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        if x0 >= x1 {
            return None;
        }
        Some(PromptBox { x0, y0, x1, y1 })
    }

    /// 0/1 tensor of shape (H, W).
    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        Tensor::from_parts(vec![self.h, self.w], data)
    }

    /// Threshold a logit map at probability 0.5 (logit 0).
    pub fn from_logits(logits: &Tensor) -> Self {
        assert_eq!(logits.rank(), 2, "logit map must be rank 2");
        let (h, w) = (logits.dims()[0], logits.dims()[1]);
        let data = logits.data().iter().map(|&v| v > 0.0).collect();
        Mask { h, w, data }
    }
}

/// One synthetic sample: image, ground-truth mask, box prompt.
#[derive(Debug, Clone)]
pub struct Sample {
    /// (3, H, W) floats in [0, 1].
    pub image: Tensor,
    pub mask: Mask,
    pub bbox: PromptBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    /// High-contrast axis-aligned ellipse on a clean background (base task).
    CrispEllipse,
    /// Union of overlapping ellipses at low contrast with soft boundary.
    LowContrastBlob,
    /// Ellipse filled with value-noise texture.
    TexturedEllipse,
    /// Star polygon with jittered radii (irregular boundary).
    RaggedPolygon,
}

/// One sub-distribution r of the task mixture.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionSpec {
    pub id: usize,
    pub family: ShapeFamily,
    /// Foreground-background intensity gap in [0, 1].
    pub contrast: f64,
    /// Additive noise sigma.
    pub noise: f64,
    /// Boundary blur iterations (3×3 box blur applied this many times).
    pub softness: u32,
    /// Mixture weight pi_r (normalized by the caller).
    pub weight: f64,
}

impl DistributionSpec {
    pub fn base() -> Self {
        DistributionSpec {
            id: 0,
            family: ShapeFamily::CrispEllipse,
            contrast: 0.8,
            noise: 0.02,
            softness: 0,
            weight: 1.0,
        }
    }

    /// The default R = 3 adapted sub-distributions.
    pub fn default_adapted() -> Vec<Self> {
        vec![
            DistributionSpec {
                id: 1,
                family: ShapeFamily::LowContrastBlob,
                contrast: 0.25,
                noise: 0.08,
                softness: 2,
                weight: 1.0 / 3.0,
            },
            DistributionSpec {
                id: 2,
                family: ShapeFamily::TexturedEllipse,
                contrast: 0.5,
                noise: 0.05,
                softness: 1,
                weight: 1.0 / 3.0,
            },
            DistributionSpec {
                id: 3,
                family: ShapeFamily::RaggedPolygon,
                contrast: 0.6,
                noise: 0.06,
                softness: 1,
                weight: 1.0 / 3.0,
            },
        ]
    }
}

/// Foreground area must land in [4%, 60%] of the image.
const AREA_MIN_FRAC: f64 = 0.04;
const AREA_MAX_FRAC: f64 = 0.60;
const MAX_SHAPE_ATTEMPTS: usize = 64;

/// Generate `n` samples of a sub-distribution. Deterministic in
/// (spec.id, seed, image_size, jitter); sample i does not depend on n.
pub fn generate(
    spec: &DistributionSpec,
    image_size: usize,
    box_jitter: usize,
    seed: u64,
    n: usize,
) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(MedError::Config("generate needs n >= 1".into()));
    }
    (0..n)
        .map(|i| generate_one(spec, image_size, box_jitter, seed, i as u64))
        .collect()
}

/// Generate the single sample with stream index `index`.
pub fn generate_one(
    spec: &DistributionSpec,
    image_size: usize,
    box_jitter: usize,
    seed: u64,
    index: u64,
) -> Result<Sample> {
    let stream = (spec.id as u64) << 32 | index;
    let mut rng = SplitMix64::substream(seed, stream);
    let s = image_size;
    let total = (s * s) as f64;

    let mut mask = None;
    for _ in 0..MAX_SHAPE_ATTEMPTS {
        let candidate = raster::sample_shape(spec.family, s, &mut rng);
        let area = candidate.count() as f64;
        if area >= AREA_MIN_FRAC * total && area <= AREA_MAX_FRAC * total {
            mask = Some(candidate);
            break;
        }
    }
    let mask = mask.ok_or_else(|| {
        MedError::Config(format!(
            "distribution {} produced degenerate shapes for {} attempts",
            spec.id, MAX_SHAPE_ATTEMPTS
        ))
    })?;

    let image = render_image(spec, &mask, &mut rng);

    let tight = mask.tight_bbox().expect("mask has foreground");
    let bbox = jitter_box(&tight, box_jitter, s, &mut rng);

    Ok(Sample { image, mask, bbox })
}

fn jitter_box(tight: &PromptBox, j: usize, s: usize, rng: &mut SplitMix64) -> PromptBox {
    let grow = |rng: &mut SplitMix64| rng.next_below(j as u64 + 1) as usize;
    PromptBox {
        x0: tight.x0.saturating_sub(grow(rng)),
        y0: tight.y0.saturating_sub(grow(rng)),
        x1: (tight.x1 + grow(rng)).min(s),
        y1: (tight.y1 + grow(rng)).min(s),
    }
}

fn render_image(spec: &DistributionSpec, mask: &Mask, rng: &mut SplitMix64) -> Tensor {
    let (h, w) = (mask.height(), mask.width());
    let bg = rng.next_range_f64(0.15, 0.35);
    let fg = (bg + spec.contrast).min(0.95);

    // soft foreground weight: binary indicator box-blurred `softness` times
    let mut weight: Vec<f64> = (0..h * w)
        .map(|i| if mask.get(i % w, i / w) { 1.0 } else { 0.0 })
        .collect();
    for _ in 0..spec.softness {
        weight = box_blur3(&weight, h, w);
    }

    let texture = if spec.family == ShapeFamily::TexturedEllipse {
        Some(value_noise(h, w, 4, rng))
    } else {
        None
    };

    let mut data = vec![0.0; 3 * h * w];
    // small per-channel tint keeps channels from being perfectly identical
    let tints = [
        rng.next_range_f64(-0.03, 0.03),
        rng.next_range_f64(-0.03, 0.03),
        rng.next_range_f64(-0.03, 0.03),
    ];
    for c in 0..3 {
        for i in 0..h * w {
            let mut v = bg + (fg - bg) * weight[i] + tints[c];
            if let Some(tex) = &texture {
                v += 0.5 * spec.contrast * (tex[i] - 0.5) * weight[i];
            }
            v += spec.noise * rng.next_normal();
            data[c * h * w + i] = v.clamp(0.0, 1.0);
        }
    }
    Tensor::from_parts(vec![3, h, w], data)
}

fn box_blur3(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            let mut cnt = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                        sum += src[ny as usize * w + nx as usize];
                        cnt += 1.0;
                    }
                }
            }
            out[y * w + x] = sum / cnt;
        }
    }
    out
}

/// Lattice value noise in [0,1] with bilinear interpolation.
fn value_noise(h: usize, w: usize, cell: usize, rng: &mut SplitMix64) -> Vec<f64> {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.next_f64()).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let fx = x as f64 / cell as f64;
            let fy = y as f64 / cell as f64;
            let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
            let (tx, ty) = (fx - ix as f64, fy - iy as f64);
            let v00 = lattice[iy * gw + ix];
            let v01 = lattice[iy * gw + ix + 1];
            let v10 = lattice[(iy + 1) * gw + ix];
            let v11 = lattice[(iy + 1) * gw + ix + 1];
            out[y * w + x] =
                (1.0 - ty) * ((1.0 - tx) * v00 + tx * v01) + ty * ((1.0 - tx) * v10 + tx * v11);
        }
    }
    out
}
