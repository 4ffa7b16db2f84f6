//! Binary morphology with the 4-connected structuring element.
//! Out-of-bounds pixels count as background.

use super::Mask;

pub fn dilate(mask: &Mask, iterations: usize) -> Mask {
    let mut cur = mask.clone();
    for _ in 0..iterations {
        let (h, w) = (cur.height(), cur.width());
        let prev = cur.clone();
        for y in 0..h {
            for x in 0..w {
                if prev.get(x, y)
                    || (x > 0 && prev.get(x - 1, y))
                    || (x + 1 < w && prev.get(x + 1, y))
                    || (y > 0 && prev.get(x, y - 1))
                    || (y + 1 < h && prev.get(x, y + 1))
                {
                    cur.set(x, y, true);
                }
            }
        }
    }
    cur
}

pub fn erode(mask: &Mask, iterations: usize) -> Mask {
    let mut cur = mask.clone();
    for _ in 0..iterations {
        let (h, w) = (cur.height(), cur.width());
        let prev = cur.clone();
        for y in 0..h {
            for x in 0..w {
                let keep = prev.get(x, y)
                    && x > 0
                    && prev.get(x - 1, y)
                    && x + 1 < w
                    && prev.get(x + 1, y)
                    && y > 0
                    && prev.get(x, y - 1)
                    && y + 1 < h
                    && prev.get(x, y + 1);
                cur.set(x, y, keep);
            }
        }
    }
    cur
}

/// Boundary band B(M): dilation minus erosion, each applied `width` times.
/// An empty mask yields an all-zero band.
pub fn boundary_map(mask: &Mask, width: usize) -> Mask {
    assert!(width >= 1, "boundary band width must be >= 1");
    let d = dilate(mask, width);
    let e = erode(mask, width);
    let (h, w) = (mask.height(), mask.width());
    Mask::from_fn(h, w, |x, y| d.get(x, y) && !e.get(x, y))
}
