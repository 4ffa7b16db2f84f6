//! The head/MLP sparsity sweep and the budget-rule probe.
//!
//! For a grid of (h, m) sparsity pairs the sweep prunes (by masking, which
//! is exactly equivalent to removal), then measures for every adjacent
//! head step and MLP step: parameter reduction, 95th-percentile boundary
//! leverage on the ground-truth band, held-out BF1/HD95 changes, and
//! damage densities per one percent of parameter reduction.

use super::{leverage_ratios, LogitField};
use crate::data::{boundary_map, Mask, Sample};
use crate::error::{MedError, Result};
use crate::metrics::{evaluate_mask_pair, macro_average};
use crate::model::{forward, GroupCatalog, GroupMask, ModelConfig, ParamStore};
use crate::scoring::{plan_cascade, PruneConfig, PruningPlan, ScoreTable};
use crate::stats::{median, percentile};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StepFamily {
    Head,
    Mlp,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub family: StepFamily,
    pub i: usize,
    pub j: usize,
    pub dc_params: usize,
    /// Parameter reduction of the step as percent of the unpruned model.
    pub dc_pct: f64,
    pub lev_mean: f64,
    pub lev_p95: f64,
    /// Same statistics over all pixels instead of the band (for RLR).
    pub region_mean: f64,
    pub region_p95: f64,
    pub d_bf1: f64,
    pub d_hd95: f64,
    /// BF1 degradation per one percent parameter reduction.
    pub bf1_density: f64,
    pub hd95_density: f64,
    pub valid: bool,
}

impl StepRecord {
    fn invalid(family: StepFamily, i: usize, j: usize) -> Self {
        StepRecord {
            family,
            i,
            j,
            dc_params: 0,
            dc_pct: 0.0,
            lev_mean: 0.0,
            lev_p95: 0.0,
            region_mean: 0.0,
            region_p95: 0.0,
            d_bf1: 0.0,
            d_hd95: 0.0,
            bf1_density: 0.0,
            hd95_density: 0.0,
            valid: false,
        }
    }
}

/// CSV with the fixed column set.
pub fn step_records_csv(records: &[StepRecord]) -> String {
    let mut out = String::from(
        "family,i,j,dC_params,dC_pct,lev_mean,lev_p95,d_bf1,d_hd95,bf1_density,hd95_density,valid\n",
    );
    for r in records {
        let fam = match r.family {
            StepFamily::Head => "head",
            StepFamily::Mlp => "mlp",
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            fam,
            r.i,
            r.j,
            r.dc_params,
            r.dc_pct,
            r.lev_mean,
            r.lev_p95,
            r.d_bf1,
            r.d_hd95,
            r.bf1_density,
            r.hd95_density,
            u8::from(r.valid)
        ));
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub valid_head_steps: usize,
    pub valid_mlp_steps: usize,
    pub median_lev95_head: Option<f64>,
    pub median_lev95_mlp: Option<f64>,
    /// Head/MLP ratio of median p95 boundary leverage.
    pub blr95: Option<f64>,
    /// Same ratio with all-pixel (region) leverage.
    pub rlr: Option<f64>,
    /// Boundary-specificity ratio BLR95 / RLR.
    pub bsr: Option<f64>,
    pub paired_wins: usize,
    pub paired_total: usize,
    pub win_rate: Option<f64>,
    pub median_paired_diff: Option<f64>,
    pub bf1_density_head: Option<f64>,
    pub bf1_density_mlp: Option<f64>,
    pub bf1_density_ratio: Option<f64>,
    pub hd95_density_head: Option<f64>,
    pub hd95_density_mlp: Option<f64>,
    pub hd95_density_ratio: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub h_grid: Vec<f64>,
    pub m_grid: Vec<f64>,
    /// Boundary band width for the leverage statistic.
    pub band_width: usize,
    /// Epsilon in the leverage denominator.
    pub eps: f64,
    /// How many calibration samples feed the leverage statistic.
    pub leverage_samples: usize,
    pub bf1_tol: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            h_grid: vec![0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            m_grid: vec![0.3, 0.5, 0.7, 0.8, 0.85, 0.9, 0.95],
            band_width: 3,
            eps: 1e-6,
            leverage_samples: 16,
            bf1_tol: 2.0,
        }
    }
}

impl SweepConfig {
    fn validate(&self) -> Result<()> {
        let ascending = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]);
        if self.h_grid.is_empty() || self.m_grid.is_empty() {
            return Err(MedError::Config("sweep grids must be nonempty".into()));
        }
        if !ascending(&self.h_grid) || !ascending(&self.m_grid) {
            return Err(MedError::Config("sweep grid values must ascend".into()));
        }
        Ok(())
    }
}

struct CellEval {
    removed: usize,
    fields: Vec<LogitField>,
    bf1: f64,
    hd95: f64,
}

fn eval_cell(
    params: &ParamStore,
    config: &ModelConfig,
    catalog: &GroupCatalog,
    plan: &PruningPlan,
    lev_set: &[Sample],
    heldout: &[Sample],
    bf1_tol: f64,
) -> Result<CellEval> {
    let mask = plan.to_mask(catalog);
    let fields: Vec<LogitField> = lev_set
        .par_iter()
        .map(|s| {
            let fp = forward(params, config, &mask, &s.image, &s.bbox)?;
            LogitField::from_tensor(fp.logit_tensor().clone())
        })
        .collect::<Result<_>>()?;
    let reports: Vec<_> = heldout
        .par_iter()
        .map(|s| {
            let fp = forward(params, config, &mask, &s.image, &s.bbox)?;
            let pred = Mask::from_logits(fp.logit_tensor());
            Ok(evaluate_mask_pair(&pred, &s.mask, bf1_tol))
        })
        .collect::<Result<Vec<_>>>()?;
    let macroavg = macro_average(&reports);
    Ok(CellEval {
        removed: plan.removed_params,
        fields,
        bf1: macroavg.bf1,
        hd95: macroavg.hd95,
    })
}

/// Run the sweep. `leverage_set` supplies the ground-truth bands and the
/// logit fields for the leverage statistic; `heldout` supplies BF1/HD95.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    params: &ParamStore,
    config: &ModelConfig,
    catalog: &GroupCatalog,
    scores: &ScoreTable,
    prune_cfg: &PruneConfig,
    sensitivity: Option<&[f64]>,
    leverage_set: &[Sample],
    heldout: &[Sample],
    sweep: &SweepConfig,
) -> Result<(Vec<StepRecord>, SweepSummary)> {
    sweep.validate()?;
    if leverage_set.is_empty() || heldout.is_empty() {
        return Err(MedError::EmptyCalibration);
    }
    let lev_set: Vec<Sample> = leverage_set
        .iter()
        .take(sweep.leverage_samples.max(1))
        .cloned()
        .collect();
    let bands: Vec<Mask> = lev_set
        .iter()
        .map(|s| boundary_map(&s.mask, sweep.band_width))
        .collect();
    let full_band = Mask::from_fn(config.image_size, config.image_size, |_, _| true);
    let total_params = params.total_params() as f64;

    let (nh, nm) = (sweep.h_grid.len(), sweep.m_grid.len());
    let mut cells: Vec<Vec<CellEval>> = Vec::with_capacity(nh);
    for &h in &sweep.h_grid {
        let mut row = Vec::with_capacity(nm);
        for &m in &sweep.m_grid {
            let cfg = PruneConfig {
                head_sparsity: h,
                mlp_sparsity: m,
                ..prune_cfg.clone()
            };
            let plan = plan_cascade(&cfg, scores, catalog, sensitivity)?;
            row.push(eval_cell(
                params, config, catalog, &plan, &lev_set, heldout, sweep.bf1_tol,
            )?);
        }
        cells.push(row);
    }

    let mut records = Vec::new();
    let make_step = |family: StepFamily,
                         i: usize,
                         j: usize,
                         before: &CellEval,
                         after: &CellEval|
     -> Result<StepRecord> {
        let dc_params = after.removed.saturating_sub(before.removed);
        if after.removed <= before.removed {
            return Ok(StepRecord::invalid(family, i, j));
        }
        let dc_pct = 100.0 * dc_params as f64 / total_params;
        let mut band_ratios = Vec::new();
        let mut region_ratios = Vec::new();
        for (s, band) in bands.iter().enumerate() {
            band_ratios.extend(leverage_ratios(
                &before.fields[s],
                &after.fields[s],
                band,
                sweep.eps,
            )?);
            region_ratios.extend(leverage_ratios(
                &before.fields[s],
                &after.fields[s],
                &full_band,
                sweep.eps,
            )?);
        }
        if band_ratios.is_empty() {
            return Ok(StepRecord::invalid(family, i, j));
        }
        let d_bf1 = after.bf1 - before.bf1;
        let d_hd95 = after.hd95 - before.hd95;
        Ok(StepRecord {
            family,
            i,
            j,
            dc_params,
            dc_pct,
            lev_mean: band_ratios.iter().sum::<f64>() / band_ratios.len() as f64 / dc_pct,
            lev_p95: percentile(&band_ratios, 0.95) / dc_pct,
            region_mean: region_ratios.iter().sum::<f64>() / region_ratios.len() as f64 / dc_pct,
            region_p95: percentile(&region_ratios, 0.95) / dc_pct,
            d_bf1,
            d_hd95,
            bf1_density: -d_bf1 / dc_pct,
            hd95_density: d_hd95 / dc_pct,
            valid: true,
        })
    };

    for i in 0..nh - 1 {
        for j in 0..nm {
            let r = make_step(StepFamily::Head, i, j, &cells[i][j], &cells[i + 1][j])?;
            records.push(r);
        }
    }
    for i in 0..nh {
        for j in 0..nm - 1 {
            let r = make_step(StepFamily::Mlp, i, j, &cells[i][j], &cells[i][j + 1])?;
            records.push(r);
        }
    }

    if records.iter().all(|r| !r.valid) {
        return Err(MedError::Config("sweep produced no valid steps".into()));
    }
    let summary = summarize(&records);
    Ok((records, summary))
}

fn summarize(records: &[StepRecord]) -> SweepSummary {
    let valid = |fam: StepFamily| -> Vec<&StepRecord> {
        records
            .iter()
            .filter(|r| r.valid && r.family == fam)
            .collect()
    };
    let heads = valid(StepFamily::Head);
    let mlps = valid(StepFamily::Mlp);
    let med = |xs: Vec<f64>| if xs.is_empty() { None } else { Some(median(&xs)) };

    let m_head = med(heads.iter().map(|r| r.lev_p95).collect());
    let m_mlp = med(mlps.iter().map(|r| r.lev_p95).collect());
    let blr95 = match (m_head, m_mlp) {
        (Some(a), Some(b)) if b != 0.0 => Some(a / b),
        _ => None,
    };
    let r_head = med(heads.iter().map(|r| r.region_p95).collect());
    let r_mlp = med(mlps.iter().map(|r| r.region_p95).collect());
    let rlr = match (r_head, r_mlp) {
        (Some(a), Some(b)) if b != 0.0 => Some(a / b),
        _ => None,
    };
    let bsr = match (blr95, rlr) {
        (Some(a), Some(b)) if b != 0.0 => Some(a / b),
        _ => None,
    };

    // paired comparison at cells where both family steps are valid
    let mut wins = 0;
    let mut total = 0;
    let mut diffs = Vec::new();
    for h in &heads {
        if let Some(m) = mlps.iter().find(|m| m.i == h.i && m.j == h.j) {
            total += 1;
            if h.lev_p95 > m.lev_p95 {
                wins += 1;
            }
            diffs.push(h.lev_p95 - m.lev_p95);
        }
    }

    let dens = |xs: Vec<f64>| med(xs);
    let bf1_h = dens(heads.iter().map(|r| r.bf1_density).collect());
    let bf1_m = dens(mlps.iter().map(|r| r.bf1_density).collect());
    let hd_h = dens(heads.iter().map(|r| r.hd95_density).collect());
    let hd_m = dens(mlps.iter().map(|r| r.hd95_density).collect());
    let ratio = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(x), Some(y)) if y != 0.0 => Some(x / y),
        _ => None,
    };

    SweepSummary {
        valid_head_steps: heads.len(),
        valid_mlp_steps: mlps.len(),
        median_lev95_head: m_head,
        median_lev95_mlp: m_mlp,
        blr95,
        rlr,
        bsr,
        paired_wins: wins,
        paired_total: total,
        win_rate: if total > 0 { Some(wins as f64 / total as f64) } else { None },
        median_paired_diff: med(diffs),
        bf1_density_head: bf1_h,
        bf1_density_mlp: bf1_m,
        bf1_density_ratio: ratio(bf1_h, bf1_m),
        hd95_density_head: hd_h,
        hd95_density_mlp: hd_m,
        hd95_density_ratio: ratio(hd_h, hd_m),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    /// Marginal boundary error per percent of parameters, head direction.
    pub de_dch: f64,
    /// Marginal boundary error per percent of parameters, MLP direction.
    pub de_dcm: f64,
    pub shift_head_to_mlp_beneficial: bool,
    pub eta: f64,
}

/// First-order probe of the budget rule: finite differences of a boundary
/// error under +/- eta sparsity shifts of the head and MLP budgets, at
/// fixed total compression. `eval_error` maps a pruned-model mask to a
/// boundary error (e.g. 1 - BF1 on held-out data).
#[allow(clippy::too_many_arguments)]
pub fn budget_rule_probe(
    catalog: &GroupCatalog,
    scores: &ScoreTable,
    prune_cfg: &PruneConfig,
    sensitivity: Option<&[f64]>,
    h: f64,
    m: f64,
    eta: f64,
    total_params: usize,
    mut eval_error: impl FnMut(&GroupMask) -> Result<f64>,
) -> Result<ProbeReport> {
    if eta == 0.0 {
        return Ok(ProbeReport {
            de_dch: 0.0,
            de_dcm: 0.0,
            shift_head_to_mlp_beneficial: false,
            eta,
        });
    }
    let interior = h - eta > 0.0 && h + eta < 1.0 && m - eta > 0.0 && m + eta < 1.0;
    if !interior {
        return Err(MedError::InfeasiblePlan(format!(
            "allocation (h={h}, m={m}) +/- eta={eta} leaves the interior"
        )));
    }
    let plan_at = |hh: f64, mm: f64| -> Result<PruningPlan> {
        let cfg = PruneConfig {
            head_sparsity: hh,
            mlp_sparsity: mm,
            ..prune_cfg.clone()
        };
        let plan = plan_cascade(&cfg, scores, catalog, sensitivity)?;
        if plan.plateau {
            return Err(MedError::InfeasiblePlan(format!(
                "probe point (h={hh}, m={mm}) sits on the min-retention boundary"
            )));
        }
        Ok(plan)
    };
    let pct = |p: &PruningPlan| 100.0 * p.removed_params as f64 / total_params as f64;

    let h_hi = plan_at(h + eta, m)?;
    let h_lo = plan_at(h - eta, m)?;
    let m_hi = plan_at(h, m + eta)?;
    let m_lo = plan_at(h, m - eta)?;
    if h_hi.removed_params <= h_lo.removed_params || m_hi.removed_params <= m_lo.removed_params {
        return Err(MedError::InfeasiblePlan(
            "probe shifts produce no parameter change (at a constraint boundary)".into(),
        ));
    }
    let e_h_hi = eval_error(&h_hi.to_mask(catalog))?;
    let e_h_lo = eval_error(&h_lo.to_mask(catalog))?;
    let e_m_hi = eval_error(&m_hi.to_mask(catalog))?;
    let e_m_lo = eval_error(&m_lo.to_mask(catalog))?;

    let de_dch = (e_h_hi - e_h_lo) / (pct(&h_hi) - pct(&h_lo));
    let de_dcm = (e_m_hi - e_m_lo) / (pct(&m_hi) - pct(&m_lo));
    Ok(ProbeReport {
        de_dch,
        de_dcm,
        shift_head_to_mlp_beneficial: de_dch > de_dcm,
        eta,
    })
}
