//! Raw computation kernels shared by tape forward and backward passes.

pub const GELU_COEF: f64 = 0.044715;
// sqrt(2/pi)
pub const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

/// C = A @ B for row-major A (m×k), B (k×n).
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (l, &av) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// C = A @ B^T for row-major A (m×k), B (n×k).
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// C = A^T @ B for row-major A (m×k), B (m×n); result (k×n).
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (l, &av) in a_row.iter().enumerate() {
            let o_row = &mut out[l * n..(l + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Softmax along contiguous rows of length `w`, with max subtraction.
pub fn softmax_rows(x: &[f64], w: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks(w).zip(out.chunks_mut(w)) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = (v - mx).exp();
            *o = e;
            sum += e;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// LayerNorm along contiguous rows of length `w` (no affine).
pub fn layernorm_rows(x: &[f64], w: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks(w).zip(out.chunks_mut(w)) {
        let mean = row.iter().sum::<f64>() / w as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
    }
    out
}

/// tanh-approximation GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    let u = GELU_SCALE * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

/// Closed-form derivative of the tanh-approximation GELU.
#[inline]
pub fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_SCALE * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_SCALE * (1.0 + 3.0 * GELU_COEF * x * x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable ln(1 + e^x).
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// 4-neighbor graph Laplacian: deg(u)*p(u) - sum of in-grid N4(u), where
/// deg(u) counts in-grid neighbors. Constant fields map to zero
/// everywhere (including borders) and the operator matrix is symmetric,
/// so it is its own adjoint.
pub fn laplacian2d(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let mut v = 0.0;
            if r > 0 {
                v += x[i] - x[i - w];
            }
            if r + 1 < h {
                v += x[i] - x[i + w];
            }
            if c > 0 {
                v += x[i] - x[i - 1];
            }
            if c + 1 < w {
                v += x[i] - x[i + 1];
            }
            out[i] = v;
        }
    }
    out
}

/// Source index weights for 1-D bilinear resizing by integer factor,
/// half-pixel-center convention: src = (dst + 0.5)/factor - 0.5, clamped.
pub fn bilinear_taps(out_len: usize, in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    debug_assert_eq!(out_len, in_len * factor);
    let mut taps = Vec::with_capacity(out_len);
    for d in 0..out_len {
        let src = (d as f64 + 0.5) / factor as f64 - 0.5;
        let src = src.clamp(0.0, (in_len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(in_len - 1);
        let frac = src - lo as f64;
        taps.push((lo, hi, frac));
    }
    taps
}
