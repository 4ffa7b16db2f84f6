//! Adam training loops: base training, adaptation (base -> adapted), and
//! post-pruning recovery with a frozen teacher.
//!
//! Everything is deterministic given the config seed: the data order is
//! fixed, per-sample gradients are computed on independent tapes (in
//! parallel) and reduced in sample order, and frozen tensors are never
//! touched.

use crate::data::{Mask, Sample};
use crate::error::{MedError, Result};
use crate::losses::{boundary_loss_parts, recovery_loss_parts, seg_loss_parts, LossWeights};
use crate::metrics::dice_iou;
use crate::model::{forward, GroupCatalog, GroupMask, ModelConfig, ParamStore};
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainLoss {
    Seg,
    Boundary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub loss: TrainLoss,
    /// Extra frozen tensor names; prompt tensors are always frozen.
    pub frozen: Vec<String>,
    /// Record held-out Dice every this many steps (0 = never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            loss: TrainLoss::Seg,
            frozen: Vec::new(),
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 || self.batch == 0 {
            return Err(MedError::Config("train config: lr >= 0, batch > 0".into()));
        }
        Ok(())
    }
}

/// Loss trajectory with named components, one row per step.
#[derive(Debug, Clone, Default)]
pub struct LossCurve {
    pub part_names: Vec<String>,
    /// (step, total, parts...)
    pub points: Vec<(usize, f64, Vec<f64>)>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss");
        for p in &self.part_names {
            out.push(',');
            out.push_str(p);
        }
        out.push('\n');
        for (step, loss, parts) in &self.points {
            out.push_str(&format!("{step},{loss}"));
            for p in parts {
                out.push_str(&format!(",{p}"));
            }
            out.push('\n');
        }
        out
    }
}

pub struct TrainOutput {
    pub params: ParamStore,
    pub curve: LossCurve,
    /// (step, held-out macro Dice) at the eval cadence.
    pub evals: Vec<(usize, f64)>,
}

struct Adam {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: usize,
}

impl Adam {
    fn new(params: &ParamStore, frozen: &dyn Fn(&str) -> bool) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, tensor) in params.iter() {
            if !frozen(name) {
                m.insert(name.clone(), vec![0.0; tensor.len()]);
                v.insert(name.clone(), vec![0.0; tensor.len()]);
            }
        }
        Adam { m, v, t: 0 }
    }

    fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        cfg: &TrainConfig,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (name, m) in self.m.iter_mut() {
            let v = self.v.get_mut(name).unwrap();
            let g = grads
                .get(name)
                .ok_or_else(|| MedError::Alignment(format!("missing gradient for {name}")))?;
            let theta = params.get_mut(name)?;
            for ((mi, vi), (ti, &gi)) in m
                .iter_mut()
                .zip(v.iter_mut())
                .zip(theta.data_mut().iter_mut().zip(g.data()))
            {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *ti -= cfg.lr * mhat / (vhat.sqrt() + cfg.adam_eps);
            }
        }
        Ok(())
    }
}

type SampleGrads = (f64, Vec<f64>, BTreeMap<String, Tensor>);

fn per_sample_grads(
    params: &ParamStore,
    config: &ModelConfig,
    mask: &GroupMask,
    sample: &Sample,
    loss: TrainLoss,
    weights: &LossWeights,
    is_frozen: &dyn Fn(&str) -> bool,
) -> Result<SampleGrads> {
    let mut fp = forward(params, config, mask, &sample.image, &sample.bbox)?;
    let parts = match loss {
        TrainLoss::Seg => seg_loss_parts(&mut fp.tape, fp.logits, &sample.mask, weights.dice_eps)?,
        TrainLoss::Boundary => boundary_loss_parts(&mut fp.tape, fp.logits, &sample.mask, weights)?,
    };
    let loss_val = fp.tape.value(parts.node).scalar_value();
    let grads = fp.tape.backward(parts.node)?;
    let mut out = BTreeMap::new();
    for (name, id) in fp.binding.iter() {
        if !is_frozen(name) {
            out.insert(name.clone(), grads.grad(*id).expect("leaf grad").clone());
        }
    }
    Ok((loss_val, parts.parts.iter().map(|(_, v)| *v).collect(), out))
}

fn mean_grads(per_sample: Vec<SampleGrads>) -> (f64, Vec<f64>, BTreeMap<String, Tensor>) {
    let n = per_sample.len() as f64;
    let mut iter = per_sample.into_iter();
    let (mut loss, mut parts, mut acc) = iter.next().expect("nonempty batch");
    for (l, p, grads) in iter {
        loss += l;
        for (a, b) in parts.iter_mut().zip(&p) {
            *a += b;
        }
        for (name, t) in acc.iter_mut() {
            for (a, &b) in t.data_mut().iter_mut().zip(grads[name].data()) {
                *a += b;
            }
        }
    }
    for t in acc.values_mut() {
        for vv in t.data_mut() {
            *vv /= n;
        }
    }
    for p in parts.iter_mut() {
        *p /= n;
    }
    (loss / n, parts, acc)
}

fn eval_dice(
    params: &ParamStore,
    config: &ModelConfig,
    mask: &GroupMask,
    heldout: &[Sample],
) -> Result<f64> {
    let dices: Vec<Result<f64>> = heldout
        .par_iter()
        .map(|s| {
            let fp = forward(params, config, mask, &s.image, &s.bbox)?;
            let pred = Mask::from_logits(fp.logit_tensor());
            Ok(dice_iou(&pred, &s.mask).0)
        })
        .collect();
    let mut total = 0.0;
    for d in dices {
        total += d?;
    }
    Ok(total / heldout.len() as f64)
}

/// Train with the seg or boundary loss. The data order is fixed: step s
/// consumes samples [s*batch .. (s+1)*batch) modulo the dataset.
pub fn train(
    params: &ParamStore,
    config: &ModelConfig,
    data: &[Sample],
    tcfg: &TrainConfig,
    weights: &LossWeights,
    heldout: Option<&[Sample]>,
) -> Result<TrainOutput> {
    tcfg.validate()?;
    if data.is_empty() {
        return Err(MedError::EmptyCalibration);
    }
    let catalog = GroupCatalog::build(params, config)?;
    let mask = GroupMask::all_active(catalog.len());
    let frozen_names = tcfg.frozen.clone();
    let is_frozen =
        move |name: &str| crate::model::is_frozen(name) || frozen_names.iter().any(|f| f == name);

    let mut cur = params.clone();
    let mut adam = Adam::new(&cur, &is_frozen);
    let part_names: Vec<String> = match tcfg.loss {
        TrainLoss::Seg => vec!["dice".into(), "bce".into()],
        TrainLoss::Boundary => vec!["dice".into(), "weighted_bce".into()],
    };
    let mut curve = LossCurve {
        part_names,
        points: Vec::with_capacity(tcfg.steps),
    };
    let mut evals = Vec::new();

    for step in 0..tcfg.steps {
        let batch: Vec<&Sample> = (0..tcfg.batch)
            .map(|k| &data[(step * tcfg.batch + k) % data.len()])
            .collect();
        let grads: Vec<Result<SampleGrads>> = batch
            .par_iter()
            .map(|s| per_sample_grads(&cur, config, &mask, s, tcfg.loss, weights, &is_frozen))
            .collect();
        let grads: Vec<SampleGrads> = grads.into_iter().collect::<Result<_>>()?;
        let (loss, parts, mean) = mean_grads(grads);
        if !loss.is_finite() {
            return Err(MedError::NonFinite(format!("training loss at step {step}")));
        }
        adam.step(&mut cur, &mean, tcfg)?;
        curve.points.push((step, loss, parts));
        if tcfg.eval_every > 0 && (step + 1) % tcfg.eval_every == 0 {
            if let Some(h) = heldout {
                evals.push((step + 1, eval_dice(&cur, config, &mask, h)?));
            }
        }
    }
    Ok(TrainOutput {
        params: cur,
        curve,
        evals,
    })
}

/// Fine-tune a copy of the base checkpoint on the adapted task. The
/// result stays aligned with the base name-for-name and dim-for-dim.
pub fn adapt(
    base: &ParamStore,
    config: &ModelConfig,
    data: &[Sample],
    tcfg: &TrainConfig,
    weights: &LossWeights,
    heldout: Option<&[Sample]>,
) -> Result<TrainOutput> {
    let out = train(base, config, data, tcfg, weights, heldout)?;
    base.check_aligned(&out.params)?;
    Ok(out)
}

/// Post-pruning recovery: optimize the recovery objective against the
/// frozen unpruned teacher. Teacher logits and encoder features are
/// cached once per sample.
pub fn recover(
    pruned: &ParamStore,
    config: &ModelConfig,
    teacher: &ParamStore,
    data: &[Sample],
    tcfg: &TrainConfig,
    weights: &LossWeights,
    heldout: Option<&[Sample]>,
) -> Result<TrainOutput> {
    tcfg.validate()?;
    if data.is_empty() {
        return Err(MedError::EmptyCalibration);
    }
    let catalog = GroupCatalog::build(pruned, config)?;
    let mask = GroupMask::all_active(catalog.len());
    let teacher_catalog = GroupCatalog::build(teacher, config)?;
    let teacher_mask = GroupMask::all_active(teacher_catalog.len());

    // teacher cache: logits and encoder features per sample index
    let cache: Vec<(Tensor, Tensor)> = data
        .par_iter()
        .map(|s| {
            let fp = forward(teacher, config, &teacher_mask, &s.image, &s.bbox)?;
            Ok((
                fp.logit_tensor().clone(),
                fp.tape.value(fp.encoder_features).clone(),
            ))
        })
        .collect::<Result<_>>()?;

    let frozen_names = tcfg.frozen.clone();
    let is_frozen =
        move |name: &str| crate::model::is_frozen(name) || frozen_names.iter().any(|f| f == name);

    let mut cur = pruned.clone();
    let mut adam = Adam::new(&cur, &is_frozen);
    let mut curve = LossCurve {
        part_names: vec![
            "seg".into(),
            "bd".into(),
            "feat".into(),
            "logit".into(),
            "freq".into(),
        ],
        points: Vec::with_capacity(tcfg.steps),
    };
    let mut evals = Vec::new();

    for step in 0..tcfg.steps {
        let idxs: Vec<usize> = (0..tcfg.batch)
            .map(|k| (step * tcfg.batch + k) % data.len())
            .collect();
        let grads: Vec<Result<SampleGrads>> = idxs
            .par_iter()
            .map(|&i| {
                let s = &data[i];
                let (t_logits, t_feat) = &cache[i];
                let mut fp = forward(&cur, config, &mask, &s.image, &s.bbox)?;
                let parts = recovery_loss_parts(
                    &mut fp.tape,
                    fp.logits,
                    fp.encoder_features,
                    t_logits,
                    t_feat,
                    &s.mask,
                    weights,
                )?;
                let loss_val = fp.tape.value(parts.node).scalar_value();
                let gm = fp.tape.backward(parts.node)?;
                let mut out = BTreeMap::new();
                for (name, id) in fp.binding.iter() {
                    if !is_frozen(name) {
                        out.insert(name.clone(), gm.grad(*id).expect("leaf grad").clone());
                    }
                }
                Ok((loss_val, parts.parts.iter().map(|(_, v)| *v).collect(), out))
            })
            .collect();
        let grads: Vec<SampleGrads> = grads.into_iter().collect::<Result<_>>()?;
        let (loss, parts, mean) = mean_grads(grads);
        if !loss.is_finite() {
            return Err(MedError::NonFinite(format!("recovery loss at step {step}")));
        }
        adam.step(&mut cur, &mean, tcfg)?;
        curve.points.push((step, loss, parts));
        if tcfg.eval_every > 0 && (step + 1) % tcfg.eval_every == 0 {
            if let Some(h) = heldout {
                evals.push((step + 1, eval_dice(&cur, config, &mask, h)?));
            }
        }
    }
    Ok(TrainOutput {
        params: cur,
        curve,
        evals,
    })
}

#[cfg(test)]
mod tests;
