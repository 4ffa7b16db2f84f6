//! Wengert-list reverse-mode autodiff.
//!
//! Ops execute eagerly and record themselves on the tape; `backward`
//! replays the list in reverse, accumulating gradients in a fixed order
//! so identical tapes produce bit-identical gradients. A tape is
//! single-owner; independent tapes may run concurrently on different
//! samples.

use super::ops;
use super::Tensor;
use crate::error::{MedError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    Reshape(NodeId),
    Softmax(NodeId),
    LayerNorm(NodeId, f64),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Log(NodeId),
    Square(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    Slice {
        src: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Broadcast(NodeId),
    UpsampleNearest {
        src: NodeId,
        factor: usize,
    },
    UpsampleBilinear {
        src: NodeId,
        factor: usize,
    },
    PatchFold {
        src: NodeId,
        patch: usize,
    },
    Laplacian(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
///
/// Every leaf has an entry; leaves unreachable from the loss get zeros.
pub struct GradMap {
    grads: Vec<Option<Tensor>>,
}

impl GradMap {
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn dims(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.dims()
    }

    pub fn check_finite(&self, id: NodeId, context: &str) -> Result<()> {
        self.value(id).check_finite(context)
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    /// Register a differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Register a non-trained input (data, masks, targets). Gradients are
    /// still defined for it, it is simply never updated.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    // ── binary elementwise ──────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(MedError::ShapeMismatch {
                op,
                lhs: self.dims(a).to_vec(),
                rhs: self.dims(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let dims = self.dims(a).to_vec();
        Ok(self.push(Tensor::from_parts(dims, data), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let dims = self.dims(a).to_vec();
        Ok(self.push(Tensor::from_parts(dims, data), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let dims = self.dims(a).to_vec();
        Ok(self.push(Tensor::from_parts(dims, data), Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("div", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x / y)
            .collect();
        let dims = self.dims(a).to_vec();
        Ok(self.push(Tensor::from_parts(dims, data), Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let dims = self.dims(a).to_vec();
        self.push(Tensor::from_parts(dims, data), Op::Scale(a, c))
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da.len() != 2 || db.len() != 2 || da[1] != db[0] {
            return Err(MedError::ShapeMismatch {
                op: "matmul",
                lhs: da.to_vec(),
                rhs: db.to_vec(),
            });
        }
        let (m, k, n) = (da[0], da[1], db[1]);
        let data = ops::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let d = self.dims(a);
        if d.len() != 2 {
            return Err(MedError::InvalidShape {
                op: "transpose",
                dims: d.to_vec(),
                reason: "rank-2 tensor required".into(),
            });
        }
        let (r, c) = (d[0], d[1]);
        let src = self.value(a).data();
        let mut data = vec![0.0; src.len()];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![c, r], data), Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: NodeId, dims: &[usize]) -> Result<NodeId> {
        let n: usize = dims.iter().product();
        if n != self.value(a).len() {
            return Err(MedError::InvalidShape {
                op: "reshape",
                dims: dims.to_vec(),
                reason: format!("element count {} != source {}", n, self.value(a).len()),
            });
        }
        let data = self.value(a).data().to_vec();
        Ok(self.push(Tensor::from_parts(dims.to_vec(), data), Op::Reshape(a)))
    }

    // ── rowwise nonlinearities (last axis) ──────────────────────────

    fn last_axis(&self, op: &'static str, a: NodeId) -> Result<usize> {
        let d = self.dims(a);
        match d.last() {
            Some(&w) if w > 0 => Ok(w),
            _ => Err(MedError::InvalidShape {
                op,
                dims: d.to_vec(),
                reason: "needs a nonempty last axis".into(),
            }),
        }
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let w = self.last_axis("softmax", a)?;
        let data = ops::softmax_rows(self.value(a).data(), w);
        let dims = self.dims(a).to_vec();
        Ok(self.push(Tensor::from_parts(dims, data), Op::Softmax(a)))
    }

    pub fn layernorm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let w = self.last_axis("layernorm", a)?;
        let data = ops::layernorm_rows(self.value(a).data(), w, eps);
        let dims = self.dims(a).to_vec();
        Ok(self.push(Tensor::from_parts(dims, data), Op::LayerNorm(a, eps)))
    }

    // ── elementwise nonlinearities ──────────────────────────────────

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let dims = self.dims(a).to_vec();
        self.push(Tensor::from_parts(dims, data), op)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, ops::gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, ops::sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, ops::softplus, Op::Softplus(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(a))
    }

    // ── structural ops ──────────────────────────────────────────────

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        let d = self.dims(a).to_vec();
        if axis >= d.len() || start >= end || end > d[axis] {
            return Err(MedError::InvalidShape {
                op: "slice",
                dims: d,
                reason: format!("axis {axis} range {start}..{end} out of bounds"),
            });
        }
        let outer: usize = d[..axis].iter().product();
        let inner: usize = d[axis + 1..].iter().product();
        let mid = d[axis];
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * mid * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut dims = d;
        dims[axis] = end - start;
        Ok(self.push(
            Tensor::from_parts(dims, data),
            Op::Slice { src: a, axis, start, end },
        ))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = parts.first().ok_or_else(|| MedError::InvalidShape {
            op: "concat",
            dims: vec![],
            reason: "no parts".into(),
        })?;
        let base_dims = self.dims(*first).to_vec();
        if axis >= base_dims.len() {
            return Err(MedError::InvalidShape {
                op: "concat",
                dims: base_dims,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut total_mid = 0;
        for &p in parts {
            let d = self.dims(p);
            let compatible = d.len() == base_dims.len()
                && d.iter()
                    .zip(&base_dims)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(MedError::ShapeMismatch {
                    op: "concat",
                    lhs: base_dims,
                    rhs: d.to_vec(),
                });
            }
            total_mid += d[axis];
        }
        let outer: usize = base_dims[..axis].iter().product();
        let inner: usize = base_dims[axis + 1..].iter().product();
        let mut dims = base_dims;
        dims[axis] = total_mid;
        let mut data = vec![0.0; outer * total_mid * inner];
        let mut offset = 0;
        for &p in parts {
            let mid = self.dims(p)[axis];
            let src = self.value(p).data();
            for o in 0..outer {
                let dst = o * total_mid * inner + offset * inner;
                let s = o * mid * inner;
                data[dst..dst + mid * inner].copy_from_slice(&src[s..s + mid * inner]);
            }
            offset += mid;
        }
        Ok(self.push(
            Tensor::from_parts(dims, data),
            Op::Concat { parts: parts.to_vec(), axis },
        ))
    }

    /// Right-aligned broadcast: source dims are padded with leading 1s and
    /// each axis must match the target or be 1.
    pub fn broadcast(&mut self, a: NodeId, target: &[usize]) -> Result<NodeId> {
        let src_dims = self.dims(a).to_vec();
        let map = broadcast_map(&src_dims, target).ok_or(MedError::ShapeMismatch {
            op: "broadcast",
            lhs: src_dims,
            rhs: target.to_vec(),
        })?;
        let src = self.value(a).data();
        let data = map.iter().map(|&i| src[i]).collect();
        Ok(self.push(Tensor::from_parts(target.to_vec(), data), Op::Broadcast(a)))
    }

    // ── 2-D spatial ops on (C,H,W) ──────────────────────────────────

    fn chw(&self, op: &'static str, a: NodeId) -> Result<(usize, usize, usize)> {
        let d = self.dims(a);
        if d.len() != 3 {
            return Err(MedError::InvalidShape {
                op,
                dims: d.to_vec(),
                reason: "rank-3 (C,H,W) tensor required".into(),
            });
        }
        Ok((d[0], d[1], d[2]))
    }

    pub fn upsample_nearest(&mut self, a: NodeId, factor: usize) -> Result<NodeId> {
        let (c, h, w) = self.chw("upsample_nearest", a)?;
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(a).data();
        let mut data = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    data[ch * oh * ow + y * ow + x] = src[ch * h * w + (y / factor) * w + x / factor];
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![c, oh, ow], data),
            Op::UpsampleNearest { src: a, factor },
        ))
    }

    pub fn upsample_bilinear(&mut self, a: NodeId, factor: usize) -> Result<NodeId> {
        let (c, h, w) = self.chw("upsample_bilinear", a)?;
        let (oh, ow) = (h * factor, w * factor);
        let ty = ops::bilinear_taps(oh, h, factor);
        let tx = ops::bilinear_taps(ow, w, factor);
        let src = self.value(a).data();
        let mut data = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for (y, &(ylo, yhi, fy)) in ty.iter().enumerate() {
                for (x, &(xlo, xhi, fx)) in tx.iter().enumerate() {
                    let v = (1.0 - fy) * (1.0 - fx) * plane[ylo * w + xlo]
                        + (1.0 - fy) * fx * plane[ylo * w + xhi]
                        + fy * (1.0 - fx) * plane[yhi * w + xlo]
                        + fy * fx * plane[yhi * w + xhi];
                    data[ch * oh * ow + y * ow + x] = v;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![c, oh, ow], data),
            Op::UpsampleBilinear { src: a, factor },
        ))
    }

    /// Strided patch extraction: (C,H,W) → (num_patches, C·p·p), patches in
    /// row-major grid order, members ordered channel-major then row then col.
    pub fn patch_fold(&mut self, a: NodeId, patch: usize) -> Result<NodeId> {
        let (c, h, w) = self.chw("patch_fold", a)?;
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(MedError::InvalidShape {
                op: "patch_fold",
                dims: self.dims(a).to_vec(),
                reason: format!("spatial dims not divisible by patch {patch}"),
            });
        }
        let (gh, gw) = (h / patch, w / patch);
        let cols = c * patch * patch;
        let src = self.value(a).data();
        let mut data = vec![0.0; gh * gw * cols];
        for gy in 0..gh {
            for gx in 0..gw {
                let row = gy * gw + gx;
                for ch in 0..c {
                    for py in 0..patch {
                        for px in 0..patch {
                            let col = ch * patch * patch + py * patch + px;
                            data[row * cols + col] =
                                src[ch * h * w + (gy * patch + py) * w + gx * patch + px];
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![gh * gw, cols], data),
            Op::PatchFold { src: a, patch },
        ))
    }

    /// 4-neighbor Laplacian (zero padding) on a rank-2 (H,W) tensor.
    pub fn laplacian(&mut self, a: NodeId) -> Result<NodeId> {
        let d = self.dims(a);
        if d.len() != 2 {
            return Err(MedError::InvalidShape {
                op: "laplacian",
                dims: d.to_vec(),
                reason: "rank-2 tensor required".into(),
            });
        }
        let (h, w) = (d[0], d[1]);
        let data = ops::laplacian2d(self.value(a).data(), h, w);
        Ok(self.push(Tensor::from_parts(vec![h, w], data), Op::Laplacian(a)))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Every leaf gets a gradient entry;
    /// leaves the loss does not reach get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap> {
        if !self.value(loss).is_scalar() {
            return Err(MedError::InvalidShape {
                op: "backward",
                dims: self.dims(loss).to_vec(),
                reason: "loss must be scalar".into(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut out: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let g = grads[i].take().map(|d| Tensor::from_parts(node.value.dims().to_vec(), d));
            if g.is_none() && matches!(node.op, Op::Leaf) {
                out.push(Some(Tensor::zeros(node.value.dims())));
            } else {
                out.push(g);
            }
        }
        Ok(GradMap { grads: out })
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], target: NodeId, delta: &[f64]| {
            let slot = &mut grads[target.0];
            match slot {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(delta) {
                        *e += d;
                    }
                }
                None => *slot = Some(delta.to_vec()),
            }
        };
        let val = |n: NodeId| self.nodes[n.0].value.data();
        let len = |n: NodeId| self.nodes[n.0].value.len();

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g);
                acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                acc(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(val(*b)).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = g.iter().zip(val(*a)).map(|(x, y)| x * y).collect();
                acc(grads, *a, &da);
                acc(grads, *b, &db);
            }
            Op::Div(a, b) => {
                let av = val(*a);
                let bv = val(*b);
                let da: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x / y).collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(x, (an, bn))| -x * an / (bn * bn))
                    .collect();
                acc(grads, *a, &da);
                acc(grads, *b, &db);
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                acc(grads, *a, &da);
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.dims(*a)[0], self.dims(*a)[1]);
                let n = self.dims(*b)[1];
                let da = ops::matmul_nt(g, val(*b), m, n, k);
                let db = ops::matmul_tn(val(*a), g, m, k, n);
                acc(grads, *a, &da);
                acc(grads, *b, &db);
            }
            Op::Transpose(a) => {
                let (r, c) = (self.dims(*a)[0], self.dims(*a)[1]);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                acc(grads, *a, &da);
            }
            Op::Reshape(a) => acc(grads, *a, g),
            Op::Softmax(a) => {
                let w = *self.dims(*a).last().unwrap();
                let y = &self.nodes[id].value;
                let mut da = vec![0.0; y.len()];
                for ((grow, yrow), orow) in
                    g.chunks(w).zip(y.data().chunks(w)).zip(da.chunks_mut(w))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for ((o, &gv), &yv) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o = (gv - dot) * yv;
                    }
                }
                acc(grads, *a, &da);
            }
            Op::LayerNorm(a, eps) => {
                let w = *self.dims(*a).last().unwrap();
                let x = val(*a);
                let y = self.nodes[id].value.data();
                let mut da = vec![0.0; x.len()];
                for ((xrow, yrow), (grow, orow)) in x
                    .chunks(w)
                    .zip(y.chunks(w))
                    .zip(g.chunks(w).zip(da.chunks_mut(w)))
                {
                    let mean = xrow.iter().sum::<f64>() / w as f64;
                    let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gm = grow.iter().sum::<f64>() / w as f64;
                    let gym = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                    for ((o, &gv), &yv) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o = inv * (gv - gm - yv * gym);
                    }
                }
                acc(grads, *a, &da);
            }
            Op::Gelu(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(val(*a))
                    .map(|(x, &v)| x * ops::gelu_deriv(v))
                    .collect();
                acc(grads, *a, &da);
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[id].value.data();
                let da: Vec<f64> = g.iter().zip(y).map(|(x, &s)| x * s * (1.0 - s)).collect();
                acc(grads, *a, &da);
            }
            Op::Softplus(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(val(*a))
                    .map(|(x, &v)| x * ops::sigmoid(v))
                    .collect();
                acc(grads, *a, &da);
            }
            Op::Log(a) => {
                let da: Vec<f64> = g.iter().zip(val(*a)).map(|(x, &v)| x / v).collect();
                acc(grads, *a, &da);
            }
            Op::Square(a) => {
                let da: Vec<f64> = g.iter().zip(val(*a)).map(|(x, &v)| 2.0 * v * x).collect();
                acc(grads, *a, &da);
            }
            Op::Sum(a) => {
                let da = vec![g[0]; len(*a)];
                acc(grads, *a, &da);
            }
            Op::Mean(a) => {
                let n = len(*a);
                let da = vec![g[0] / n as f64; n];
                acc(grads, *a, &da);
            }
            Op::Slice { src, axis, start, end } => {
                let d = self.dims(*src);
                let outer: usize = d[..*axis].iter().product();
                let inner: usize = d[*axis + 1..].iter().product();
                let mid = d[*axis];
                let mut da = vec![0.0; len(*src)];
                let span = (end - start) * inner;
                for o in 0..outer {
                    let dst = o * mid * inner + start * inner;
                    da[dst..dst + span].copy_from_slice(&g[o * span..(o + 1) * span]);
                }
                acc(grads, *src, &da);
            }
            Op::Concat { parts, axis } => {
                let out_dims = self.dims(NodeId(id));
                let outer: usize = out_dims[..*axis].iter().product();
                let inner: usize = out_dims[*axis + 1..].iter().product();
                let total_mid = out_dims[*axis];
                let mut offset = 0;
                for &p in parts {
                    let mid = self.dims(p)[*axis];
                    let mut dp = vec![0.0; len(p)];
                    for o in 0..outer {
                        let src = o * total_mid * inner + offset * inner;
                        let dst = o * mid * inner;
                        dp[dst..dst + mid * inner].copy_from_slice(&g[src..src + mid * inner]);
                    }
                    acc(grads, p, &dp);
                    offset += mid;
                }
            }
            Op::Broadcast(a) => {
                let map = broadcast_map(self.dims(*a), self.dims(NodeId(id)))
                    .expect("broadcast validated at record time");
                let mut da = vec![0.0; len(*a)];
                for (out_i, &src_i) in map.iter().enumerate() {
                    da[src_i] += g[out_i];
                }
                acc(grads, *a, &da);
            }
            Op::UpsampleNearest { src, factor } => {
                let (c, h, w) = {
                    let d = self.dims(*src);
                    (d[0], d[1], d[2])
                };
                let (oh, ow) = (h * factor, w * factor);
                let mut da = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            da[ch * h * w + (y / factor) * w + x / factor] +=
                                g[ch * oh * ow + y * ow + x];
                        }
                    }
                }
                acc(grads, *src, &da);
            }
            Op::UpsampleBilinear { src, factor } => {
                let (c, h, w) = {
                    let d = self.dims(*src);
                    (d[0], d[1], d[2])
                };
                let (oh, ow) = (h * factor, w * factor);
                let ty = ops::bilinear_taps(oh, h, *factor);
                let tx = ops::bilinear_taps(ow, w, *factor);
                let mut da = vec![0.0; c * h * w];
                for ch in 0..c {
                    let plane = &mut da[ch * h * w..(ch + 1) * h * w];
                    for (y, &(ylo, yhi, fy)) in ty.iter().enumerate() {
                        for (x, &(xlo, xhi, fx)) in tx.iter().enumerate() {
                            let gv = g[ch * oh * ow + y * ow + x];
                            plane[ylo * w + xlo] += (1.0 - fy) * (1.0 - fx) * gv;
                            plane[ylo * w + xhi] += (1.0 - fy) * fx * gv;
                            plane[yhi * w + xlo] += fy * (1.0 - fx) * gv;
                            plane[yhi * w + xhi] += fy * fx * gv;
                        }
                    }
                }
                acc(grads, *src, &da);
            }
            Op::PatchFold { src, patch } => {
                let (c, h, w) = {
                    let d = self.dims(*src);
                    (d[0], d[1], d[2])
                };
                let p = *patch;
                let (gh, gw) = (h / p, w / p);
                let cols = c * p * p;
                let mut da = vec![0.0; c * h * w];
                for gy in 0..gh {
                    for gx in 0..gw {
                        let row = gy * gw + gx;
                        for ch in 0..c {
                            for py in 0..p {
                                for px in 0..p {
                                    let col = ch * p * p + py * p + px;
                                    da[ch * h * w + (gy * p + py) * w + gx * p + px] +=
                                        g[row * cols + col];
                                }
                            }
                        }
                    }
                }
                acc(grads, *src, &da);
            }
            Op::Laplacian(a) => {
                let d = self.dims(*a);
                let da = ops::laplacian2d(g, d[0], d[1]);
                acc(grads, *a, &da);
            }
        }
    }
}

/// Flat source index for every flat target index, or None if the shapes
/// are not broadcast-compatible (right-aligned, 1 expands).
fn broadcast_map(src_dims: &[usize], target: &[usize]) -> Option<Vec<usize>> {
    if src_dims.len() > target.len() {
        return None;
    }
    let rank = target.len();
    let pad = rank - src_dims.len();
    let mut padded = vec![1usize; rank];
    padded[pad..].copy_from_slice(src_dims);
    for (s, t) in padded.iter().zip(target) {
        if *s != 1 && s != t {
            return None;
        }
    }
    // effective source strides: 0 on expanded axes
    let mut src_strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        src_strides[i] = if padded[i] == 1 { 0 } else { acc };
        acc *= padded[i];
    }
    let total: usize = target.iter().product();
    let mut map = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        let mut src = 0;
        for i in (0..rank).rev() {
            let coord = rem % target[i];
            rem /= target[i];
            src += coord.min(padded[i] - 1) * src_strides[i];
        }
        map.push(src);
    }
    Some(map)
}
