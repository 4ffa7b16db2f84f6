//! Central-finite-difference gradient verification.

use super::{NodeId, Tape, Tensor};
use crate::error::{MedError, Result};
use crate::rng::SplitMix64;

/// Max relative error between the tape gradient of `f` and central finite
/// differences, over every coordinate of `theta`.
///
/// `f` receives a fresh tape with `theta` already registered as a leaf and
/// must return the scalar loss node. Relative error per coordinate is
/// |analytic − central| / (|analytic| + |central| + 1e-12).
pub fn grad_check<F>(f: F, theta: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let coords: Vec<usize> = (0..theta.len()).collect();
    check_coords(&f, theta, h, &coords)
}

/// Same check restricted to `n_coords` coordinates drawn without
/// replacement from a seeded stream. Used for large parameter vectors
/// where probing every coordinate is not affordable.
pub fn grad_check_sampled<F>(
    f: F,
    theta: &Tensor,
    h: f64,
    n_coords: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let mut rng = SplitMix64::new(seed);
    let n = theta.len();
    let take = n_coords.min(n);
    // partial Fisher–Yates over index vector
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..take {
        let j = i + rng.next_below((n - i) as u64) as usize;
        idx.swap(i, j);
    }
    idx.truncate(take);
    check_coords(&f, theta, h, &idx)
}

fn check_coords<F>(f: &F, theta: &Tensor, h: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(MedError::Config(format!(
            "grad_check step {h} outside [1e-7, 1e-3]"
        )));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let id = tape.leaf(t.clone());
        let loss = f(&mut tape, id)?;
        if !tape.value(loss).is_scalar() {
            return Err(MedError::InvalidShape {
                op: "grad_check",
                dims: tape.dims(loss).to_vec(),
                reason: "loss must be scalar".into(),
            });
        }
        let v = tape.value(loss).scalar_value();
        if !v.is_finite() {
            return Err(MedError::NonFinite("grad_check loss".into()));
        }
        Ok(v)
    };

    // analytic gradient
    let mut tape = Tape::new();
    let id = tape.leaf(theta.clone());
    let loss = f(&mut tape, id)?;
    eval(theta)?; // validates scalar/finite on the same path
    let grads = tape.backward(loss)?;
    let analytic = grads.grad(id).expect("leaf gradient present");

    let mut worst: f64 = 0.0;
    let mut probe = theta.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let central = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}
