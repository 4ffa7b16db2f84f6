//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Everything downstream (the segmentation model, losses, Fisher
//! estimation) runs on these two pieces: a row-major [`Tensor`] and a
//! [`Tape`] that records ops and replays them in reverse for gradients.

mod grad_check;
mod ops;
mod tape;


pub use grad_check::{grad_check, grad_check_sampled};
pub use ops::{gelu, sigmoid, softplus};
pub use tape::{GradMap, NodeId, Tape};

use crate::error::{MedError, Result};

/// 4-neighbor Laplacian (zero padding) of a rank-2 tensor, off-tape.
pub fn laplacian_of(t: &Tensor) -> Tensor {
    assert_eq!(t.rank(), 2, "laplacian_of needs a rank-2 tensor");
    let (h, w) = (t.dims()[0], t.dims()[1]);
    Tensor::from_parts(vec![h, w], ops::laplacian2d(t.data(), h, w))
}

/// Row-major dense tensor of 64-bit floats.
///
/// Invariants: `product(dims) == data.len()` and every entry is finite.
/// A NaN or Inf anywhere is an error state, rejected at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(MedError::InvalidShape {
                op: "Tensor::new",
                dims,
                reason: format!("dims product {} != data length {}", n, data.len()),
            });
        }
        let t = Tensor { dims, data };
        t.check_finite("Tensor::new")?;
        Ok(t)
    }

    /// Construct without the finiteness scan. For internal op outputs whose
    /// inputs were already validated.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Tensor { dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(dims: &[usize], v: f64) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            dims: vec![],
            data: vec![v],
        }
    }

    /// Identity matrix of side `n`.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor {
            dims: vec![n, n],
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar (or single-element) tensor.
    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Element of a rank-2 tensor.
    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.dims.len(), 2);
        self.data[r * self.dims[1] + c]
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(MedError::NonFinite(context.to_string()))
        }
    }

    /// Largest absolute element-wise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
