//! Diagonal Fisher estimation, Cross-Fisher, second-order intervention
//! cost approximations, and the exact-intervention oracle.
//!
//! The empirical Fisher of a loss is the per-parameter mean squared
//! gradient over a calibration set, computed with batch size 1 so every
//! sample contributes its own gradient. The zero cost of a group is
//! approximated by 1/2 * sum_i F_i * theta_i^2 over its members; the
//! reset cost uses the Cross-Fisher sqrt(F_adapted * F_base + eps) with
//! the adaptation drift (theta_adapted - theta_base) in place of theta.

use crate::data::Sample;
use crate::error::{MedError, Result};
use crate::losses::{boundary_loss, seg_loss, LossWeights};
use crate::model::{
    apply_group_intervention, forward, GroupCatalog, GroupMask, InterventionKind, ModelConfig,
    ParamStore,
};
use crate::tensor::Tensor;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::Path;

/// Which loss drives a Fisher estimate or the exact oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FisherLoss {
    /// Boundary-weighted loss (the default for scoring).
    Boundary,
    /// Plain Dice + BCE (vanilla-Fisher ablation and the oracle default).
    Seg,
}

/// Per-parameter nonnegative Fisher values, keyed like the parameter
/// store minus frozen (prompt) tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherMap {
    values: BTreeMap<String, Tensor>,
}

impl FisherMap {
    /// Build from named tensors, validating nonnegativity.
    pub fn from_named_tensors(
        entries: impl IntoIterator<Item = (String, Tensor)>,
    ) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (name, t) in entries {
            if t.data().iter().any(|&v| v < 0.0) {
                return Err(MedError::Config(format!(
                    "fisher tensor {name} has negative values"
                )));
            }
            values.insert(name, t);
        }
        Ok(FisherMap { values })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.values
            .get(name)
            .ok_or_else(|| MedError::Alignment(format!("fisher map missing tensor {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.values.iter()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn check_keys_match(&self, other: &FisherMap) -> Result<()> {
        if self.values.len() != other.values.len()
            || !self
                .values
                .keys()
                .zip(other.values.keys())
                .all(|(a, b)| a == b)
        {
            return Err(MedError::Alignment(
                "fisher maps have different key sets".into(),
            ));
        }
        Ok(())
    }

    /// Weighted elementwise combination sum_r pi_r * F_r.
    pub fn weighted_sum(maps: &[FisherMap], pi: &[f64]) -> Result<FisherMap> {
        assert_eq!(maps.len(), pi.len());
        let first = maps.first().ok_or(MedError::EmptyCalibration)?;
        let mut out = first.values.clone();
        for t in out.values_mut() {
            let w = pi[0];
            for v in t.data_mut() {
                *v *= w;
            }
        }
        for (map, &w) in maps.iter().zip(pi).skip(1) {
            first.check_keys_match(map)?;
            for (name, t) in out.iter_mut() {
                let src = map.values.get(name).unwrap();
                for (o, &s) in t.data_mut().iter_mut().zip(src.data()) {
                    *o += w * s;
                }
            }
        }
        Ok(FisherMap { values: out })
    }

    /// Sum of values over every tensor whose name starts with `prefix`.
    pub fn prefix_sum(&self, prefix: &str) -> f64 {
        self.values
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.data().iter().sum::<f64>())
            .sum()
    }

    /// Serialize in the checkpoint entry encoding with a "fisher/" prefix.
    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<(String, &Tensor)> = self
            .values
            .iter()
            .map(|(n, t)| (format!("fisher/{n}"), t))
            .collect();
        crate::model::write_tensor_entries(path, entries.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (name, tensor) in crate::model::read_tensor_entries(path)? {
            let stripped = name
                .strip_prefix("fisher/")
                .ok_or_else(|| MedError::Alignment(format!("entry {name} lacks fisher/ prefix")))?;
            if tensor.data().iter().any(|&v| v < 0.0) {
                return Err(MedError::Config(format!(
                    "fisher entry {name} has negative values"
                )));
            }
            values.insert(stripped.to_string(), tensor);
        }
        Ok(FisherMap { values })
    }
}

fn loss_node(
    tape: &mut crate::tensor::Tape,
    logits: crate::tensor::NodeId,
    sample: &Sample,
    loss: FisherLoss,
    weights: &LossWeights,
) -> Result<crate::tensor::NodeId> {
    match loss {
        FisherLoss::Boundary => boundary_loss(tape, logits, &sample.mask, weights),
        FisherLoss::Seg => seg_loss(tape, logits, &sample.mask, weights.dice_eps),
    }
}

/// Empirical diagonal Fisher: mean over the calibration set of the
/// squared per-sample gradient. Frozen (prompt) tensors are excluded.
pub fn estimate_fisher(
    params: &ParamStore,
    config: &ModelConfig,
    calib: &[Sample],
    loss: FisherLoss,
    weights: &LossWeights,
) -> Result<FisherMap> {
    let catalog_mask = {
        let catalog = GroupCatalog::build(params, config)?;
        GroupMask::all_active(catalog.len())
    };
    estimate_fisher_with(params, calib.len(), |i| {
        let sample = &calib[i];
        let mut fp = forward(params, config, &catalog_mask, &sample.image, &sample.bbox)?;
        let loss_id = loss_node(&mut fp.tape, fp.logits, sample, loss, weights)?;
        let grads = fp.tape.backward(loss_id)?;
        let mut out = BTreeMap::new();
        for (name, id) in fp.binding.iter() {
            if crate::model::is_frozen(name) {
                continue;
            }
            out.insert(name.clone(), grads.grad(*id).expect("leaf gradient").clone());
        }
        Ok(out)
    })
}

/// Fisher accumulation over any per-sample gradient source. Gradients are
/// computed in parallel chunks and squared-accumulated in sample order,
/// so results are deterministic.
pub fn estimate_fisher_with<F>(params: &ParamStore, n_samples: usize, grad_fn: F) -> Result<FisherMap>
where
    F: Fn(usize) -> Result<BTreeMap<String, Tensor>> + Sync,
{
    if n_samples == 0 {
        return Err(MedError::EmptyCalibration);
    }
    let mut acc: BTreeMap<String, Tensor> = params
        .iter()
        .filter(|(n, _)| !crate::model::is_frozen(n))
        .map(|(n, t)| (n.clone(), Tensor::zeros(t.dims())))
        .collect();

    let indices: Vec<usize> = (0..n_samples).collect();
    for chunk in indices.chunks(8) {
        let grads: Vec<Result<BTreeMap<String, Tensor>>> =
            chunk.par_iter().map(|&i| grad_fn(i)).collect();
        for per_sample in grads {
            let per_sample = per_sample?;
            for (name, t) in acc.iter_mut() {
                let g = per_sample.get(name).ok_or_else(|| {
                    MedError::Alignment(format!("gradient source missing tensor {name}"))
                })?;
                for (a, &v) in t.data_mut().iter_mut().zip(g.data()) {
                    *a += v * v;
                }
            }
        }
    }
    let n = n_samples as f64;
    for t in acc.values_mut() {
        for v in t.data_mut() {
            *v /= n;
        }
    }
    Ok(FisherMap { values: acc })
}

/// Cross-Fisher: elementwise sqrt(f_adapted * f_base + eps).
pub fn cross_fisher(fm: &FisherMap, fs: &FisherMap, eps: f64) -> Result<FisherMap> {
    fm.check_keys_match(fs)?;
    let mut values = BTreeMap::new();
    for (name, a) in fm.iter() {
        let b = fs.get(name)?;
        if a.dims() != b.dims() {
            return Err(MedError::Alignment(format!(
                "fisher tensor {name}: dims {:?} vs {:?}",
                a.dims(),
                b.dims()
            )));
        }
        let data: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x * y + eps).sqrt())
            .collect();
        values.insert(name.clone(), Tensor::from_parts(a.dims().to_vec(), data));
    }
    Ok(FisherMap { values })
}

/// Zero-intervention approximation per group:
/// 1/2 * sum_{i in g} F_i * theta_i^2.
pub fn approx_zero_cost(
    fisher: &FisherMap,
    params: &ParamStore,
    catalog: &GroupCatalog,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(catalog.len());
    for group in catalog.groups() {
        let mut acc = 0.0;
        for m in &group.members {
            let f = fisher.get(&m.tensor)?;
            let t = params.get(&m.tensor)?;
            let (fd, td) = (f.data(), t.data());
            m.for_each_index(t.dims(), |i| acc += fd[i] * td[i] * td[i]);
        }
        out.push(0.5 * acc);
    }
    Ok(out)
}

/// Reset-intervention approximation per group:
/// 1/2 * sum_{i in g} F_cross_i * (theta_adapted_i - theta_base_i)^2.
pub fn approx_reset_cost(
    fcross: &FisherMap,
    adapted: &ParamStore,
    base: &ParamStore,
    catalog: &GroupCatalog,
) -> Result<Vec<f64>> {
    adapted.check_aligned(base)?;
    let mut out = Vec::with_capacity(catalog.len());
    for group in catalog.groups() {
        let mut acc = 0.0;
        for m in &group.members {
            let f = fcross.get(&m.tensor)?;
            let am = adapted.get(&m.tensor)?;
            let bm = base.get(&m.tensor)?;
            let (fd, ad, bd) = (f.data(), am.data(), bm.data());
            m.for_each_index(am.dims(), |i| {
                let drift = ad[i] - bd[i];
                acc += fd[i] * drift * drift;
            });
        }
        out.push(0.5 * acc);
    }
    Ok(out)
}

/// Mean loss over a calibration set (the empirical risk R-hat).
pub fn empirical_risk(
    params: &ParamStore,
    config: &ModelConfig,
    calib: &[Sample],
    loss: FisherLoss,
    weights: &LossWeights,
) -> Result<f64> {
    if calib.is_empty() {
        return Err(MedError::EmptyCalibration);
    }
    let catalog = GroupCatalog::build(params, config)?;
    let mask = GroupMask::all_active(catalog.len());
    let losses: Vec<Result<f64>> = calib
        .par_iter()
        .map(|sample| {
            let mut fp = forward(params, config, &mask, &sample.image, &sample.bbox)?;
            let id = loss_node(&mut fp.tape, fp.logits, sample, loss, weights)?;
            Ok(fp.tape.value(id).scalar_value())
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / calib.len() as f64)
}

/// Exact intervention cost of one group: the risk change caused by
/// zeroing or resetting it, measured on the calibration set.
#[allow(clippy::too_many_arguments)]
pub fn exact_intervention_oracle(
    params: &ParamStore,
    config: &ModelConfig,
    reference: Option<&ParamStore>,
    catalog: &GroupCatalog,
    calib: &[Sample],
    group: usize,
    kind: InterventionKind,
    loss: FisherLoss,
    weights: &LossWeights,
) -> Result<f64> {
    let base_risk = empirical_risk(params, config, calib, loss, weights)?;
    let modified = apply_group_intervention(params, catalog, group, kind, reference)?;
    let new_risk = empirical_risk(&modified, config, calib, loss, weights)?;
    Ok(new_risk - base_risk)
}

/// Exact costs for every group, computing the unmodified risk once.
#[allow(clippy::too_many_arguments)]
pub fn oracle_all_groups(
    params: &ParamStore,
    config: &ModelConfig,
    reference: Option<&ParamStore>,
    catalog: &GroupCatalog,
    calib: &[Sample],
    kind: InterventionKind,
    loss: FisherLoss,
    weights: &LossWeights,
) -> Result<Vec<f64>> {
    let base_risk = empirical_risk(params, config, calib, loss, weights)?;
    let mut out = Vec::with_capacity(catalog.len());
    for g in 0..catalog.len() {
        let modified = apply_group_intervention(params, catalog, g, kind, reference)?;
        let risk = empirical_risk(&modified, config, calib, loss, weights)?;
        out.push(risk - base_risk);
    }
    Ok(out)
}
