//! Fused dual-intervention scores, distribution-aware aggregation,
//! block-sensitive head budgets, the head-to-MLP cascade plan, and the
//! baseline scorers.
//!
//! Priority P_g = Q_g / (c_g + eps)^tau; groups with the smallest P are
//! pruned first. Ties break by ascending group id so plans are
//! deterministic.

#[cfg(test)]
mod tests;

use crate::error::{MedError, Result};
use crate::fisher::FisherMap;
use crate::model::{GroupCatalog, GroupKind, GroupMask, ParamStore};
use crate::rng::SplitMix64;
use serde::{Deserialize, Serialize};

/// Per-distribution dual intervention costs, indexed [r][group].
#[derive(Debug, Clone, Default)]
pub struct InterventionCosts {
    pub zero: Vec<Vec<f64>>,
    pub reset: Vec<Vec<f64>>,
}

impl InterventionCosts {
    pub fn num_distributions(&self) -> usize {
        self.zero.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scorer {
    Medcore,
    Random,
    Magnitude,
    ZeroOnly,
    VanillaFisher,
    NoVariance,
    NoReset,
    NoBoundary,
}

impl Scorer {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "medcore" => Ok(Scorer::Medcore),
            "random" => Ok(Scorer::Random),
            "magnitude" => Ok(Scorer::Magnitude),
            "zero-only" => Ok(Scorer::ZeroOnly),
            "vanilla-fisher" => Ok(Scorer::VanillaFisher),
            "no-variance" => Ok(Scorer::NoVariance),
            "no-reset" => Ok(Scorer::NoReset),
            "no-boundary" => Ok(Scorer::NoBoundary),
            other => Err(MedError::Config(format!("unknown scorer {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scorer::Medcore => "medcore",
            Scorer::Random => "random",
            Scorer::Magnitude => "magnitude",
            Scorer::ZeroOnly => "zero-only",
            Scorer::VanillaFisher => "vanilla-fisher",
            Scorer::NoVariance => "no-variance",
            Scorer::NoReset => "no-reset",
            Scorer::NoBoundary => "no-boundary",
        }
    }

    /// Whether the scorer needs seg-loss Fisher instead of boundary Fisher.
    pub fn uses_seg_fisher(&self) -> bool {
        matches!(self, Scorer::VanillaFisher | Scorer::NoBoundary)
    }

    /// Whether block budgets come from Fisher sensitivity (vs uniform).
    pub fn uses_fisher_budgets(&self) -> bool {
        !matches!(self, Scorer::Random | Scorer::Magnitude)
    }

    /// Vanilla Fisher pools the calibration sets into one distribution.
    pub fn pools_distributions(&self) -> bool {
        matches!(self, Scorer::VanillaFisher)
    }

    /// Effective alpha override: scorers without a reset signal use
    /// alpha = 1 everywhere.
    pub fn forces_alpha_one(&self) -> bool {
        matches!(self, Scorer::ZeroOnly | Scorer::NoReset | Scorer::VanillaFisher)
    }

    pub fn forces_beta_zero(&self) -> bool {
        matches!(self, Scorer::NoVariance | Scorer::VanillaFisher)
    }
}

/// Block mixture weight alpha: one value for every block or per block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaSetting {
    Scalar(f64),
    PerBlock(Vec<f64>),
}

impl Default for AlphaSetting {
    fn default() -> Self {
        AlphaSetting::Scalar(0.5)
    }
}

impl AlphaSetting {
    pub fn for_block(&self, b: usize) -> f64 {
        match self {
            AlphaSetting::Scalar(a) => *a,
            AlphaSetting::PerBlock(v) => v[b],
        }
    }

    pub fn validate(&self, num_blocks: usize) -> Result<()> {
        let check = |a: f64| -> Result<()> {
            if (0.0..=1.0).contains(&a) {
                Ok(())
            } else {
                Err(MedError::Config(format!("alpha {a} outside [0,1]")))
            }
        };
        match self {
            AlphaSetting::Scalar(a) => check(*a),
            AlphaSetting::PerBlock(v) => {
                if v.len() != num_blocks {
                    return Err(MedError::Config(format!(
                        "alpha list length {} != {num_blocks} blocks",
                        v.len()
                    )));
                }
                v.iter().try_for_each(|&a| check(a))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneMode {
    OneTime,
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    pub alpha: AlphaSetting,
    /// Cost exponent tau in the priority.
    pub tau: f64,
    /// Priority floor epsilon.
    pub epsilon: f64,
    /// Variance weight beta in the distribution aggregation.
    pub beta: f64,
    pub head_sparsity: f64,
    pub mlp_sparsity: f64,
    /// Explicit protected block set; None = last max(1, round(L/6)) blocks.
    pub protected_blocks: Option<Vec<usize>>,
    /// Minimum surviving heads per block.
    pub min_heads: usize,
    /// Minimum surviving MLP fraction per block (rho_min).
    pub min_mlp_frac: f64,
    pub mode: PruneMode,
    pub scorer: Scorer,
    /// Recompute MLP priorities on the head-pruned model (Algorithm 1
    /// "recompute or reuse").
    pub recompute_mlp_scores: bool,
    /// Cross-Fisher floor epsilon_F.
    pub fisher_floor: f64,
    /// Seed for the random baseline.
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            alpha: AlphaSetting::default(),
            tau: 1.0,
            epsilon: 1e-8,
            beta: 0.25,
            head_sparsity: 0.5,
            mlp_sparsity: 0.7,
            protected_blocks: None,
            min_heads: 1,
            min_mlp_frac: 0.05,
            mode: PruneMode::OneTime,
            scorer: Scorer::Medcore,
            recompute_mlp_scores: true,
            fisher_floor: 1e-12,
            seed: 0,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self, num_blocks: usize) -> Result<()> {
        self.alpha.validate(num_blocks)?;
        let ok = (0.0..1.0).contains(&self.head_sparsity)
            && (0.0..1.0).contains(&self.mlp_sparsity)
            && self.tau >= 0.0
            && self.beta >= 0.0
            && self.epsilon >= 0.0
            && (0.0..1.0).contains(&self.min_mlp_frac);
        if !ok {
            return Err(MedError::Config(
                "prune config: need h,m in [0,1), tau/beta/eps >= 0".into(),
            ));
        }
        if let Some(p) = &self.protected_blocks {
            if p.iter().any(|&b| b >= num_blocks) {
                return Err(MedError::Config(format!(
                    "protected block out of range (L={num_blocks})"
                )));
            }
        }
        Ok(())
    }

    /// Protected blocks: explicit set, or the last max(1, round(L/6))
    /// blocks (two of twelve in the reference layout, scaled down).
    pub fn protected_set(&self, num_blocks: usize) -> Vec<bool> {
        let mut prot = vec![false; num_blocks];
        match &self.protected_blocks {
            Some(list) => {
                for &b in list {
                    prot[b] = true;
                }
            }
            None => {
                let count = ((2 * num_blocks + 6) / 12).max(1);
                for b in num_blocks.saturating_sub(count)..num_blocks {
                    prot[b] = true;
                }
            }
        }
        prot
    }
}

/// Scored groups: per-distribution dual costs, fused Q, aggregated
/// Q_dist, and priorities.
#[derive(Debug, Clone)]
pub struct ScoreTable {
    /// (kind, block, cost) per group, in catalog order.
    pub kinds: Vec<GroupKind>,
    pub blocks: Vec<usize>,
    pub costs: Vec<usize>,
    /// Fused Q per distribution: q_per_dist[r][g].
    pub q_per_dist: Vec<Vec<f64>>,
    /// pi-weighted mean of the per-distribution zero / reset costs.
    pub d_zero: Vec<f64>,
    pub d_reset: Vec<f64>,
    pub q_dist: Vec<f64>,
    pub priority: Vec<f64>,
}

impl ScoreTable {
    pub fn len(&self) -> usize {
        self.priority.len()
    }

    pub fn is_empty(&self) -> bool {
        self.priority.is_empty()
    }
}

/// Q_g^(r) = alpha_b * zero + (1 - alpha_b) * reset, per distribution.
pub fn fuse_scores(
    costs: &InterventionCosts,
    alpha: &AlphaSetting,
    catalog: &GroupCatalog,
) -> Result<Vec<Vec<f64>>> {
    let k = catalog.len();
    let mut out = Vec::with_capacity(costs.zero.len());
    for (zero, reset) in costs.zero.iter().zip(&costs.reset) {
        if zero.len() != k || reset.len() != k {
            return Err(MedError::Config(format!(
                "cost table length {} != {} groups",
                zero.len(),
                k
            )));
        }
        let q: Vec<f64> = catalog
            .groups()
            .iter()
            .map(|g| {
                let a = alpha.for_block(g.block);
                a * zero[g.id] + (1.0 - a) * reset[g.id]
            })
            .collect();
        out.push(q);
    }
    Ok(out)
}

/// Q_dist = sum_r pi_r Q^(r) + beta * Var_r[Q^(r)] with the pi-weighted
/// population variance.
pub fn aggregate_distributions(q_per_dist: &[Vec<f64>], pi: &[f64], beta: f64) -> Vec<f64> {
    assert_eq!(q_per_dist.len(), pi.len(), "pi length mismatch");
    assert!(!q_per_dist.is_empty());
    let k = q_per_dist[0].len();
    let mut out = Vec::with_capacity(k);
    for g in 0..k {
        let mean: f64 = q_per_dist.iter().zip(pi).map(|(q, &w)| w * q[g]).sum();
        let var: f64 = q_per_dist
            .iter()
            .zip(pi)
            .map(|(q, &w)| w * (q[g] - mean) * (q[g] - mean))
            .sum();
        out.push(mean + beta * var);
    }
    out
}

/// P_g = Q_g / (c_g + eps)^tau.
pub fn priorities(q_dist: &[f64], costs: &[usize], tau: f64, eps: f64) -> Vec<f64> {
    q_dist
        .iter()
        .zip(costs)
        .map(|(&q, &c)| q / (c as f64 + eps).powf(tau))
        .collect()
}

/// Assemble the score table for a Fisher-driven scorer. `costs` must be
/// boundary-based for medcore/zero-only/no-reset/no-variance and
/// seg-based for no-boundary/vanilla; vanilla additionally passes a
/// single pooled distribution.
pub fn score_table(
    scorer: Scorer,
    cfg: &PruneConfig,
    catalog: &GroupCatalog,
    costs: &InterventionCosts,
    pi: &[f64],
) -> Result<ScoreTable> {
    let alpha = if scorer.forces_alpha_one() {
        AlphaSetting::Scalar(1.0)
    } else {
        cfg.alpha.clone()
    };
    let beta = if scorer.forces_beta_zero() { 0.0 } else { cfg.beta };
    let pi_sum: f64 = pi.iter().sum();
    if (pi_sum - 1.0).abs() > 1e-9 {
        return Err(MedError::Config(format!("pi weights sum to {pi_sum}, not 1")));
    }
    let q_per_dist = fuse_scores(costs, &alpha, catalog)?;
    let q_dist = aggregate_distributions(&q_per_dist, pi, beta);
    let group_costs: Vec<usize> = catalog.groups().iter().map(|g| g.cost).collect();
    let priority = priorities(&q_dist, &group_costs, cfg.tau, cfg.epsilon);

    let weighted_mean = |per: &[Vec<f64>]| -> Vec<f64> {
        (0..catalog.len())
            .map(|g| per.iter().zip(pi).map(|(v, &w)| w * v[g]).sum())
            .collect()
    };
    Ok(ScoreTable {
        kinds: catalog.groups().iter().map(|g| g.kind).collect(),
        blocks: catalog.groups().iter().map(|g| g.block).collect(),
        costs: group_costs,
        d_zero: weighted_mean(&costs.zero),
        d_reset: weighted_mean(&costs.reset),
        q_per_dist,
        q_dist,
        priority,
    })
}

/// Magnitude and random baselines need no Fisher input.
pub fn baseline_score_table(
    scorer: Scorer,
    cfg: &PruneConfig,
    params: &ParamStore,
    catalog: &GroupCatalog,
) -> Result<ScoreTable> {
    let k = catalog.len();
    let priority: Vec<f64> = match scorer {
        Scorer::Magnitude => (0..k)
            .map(|g| catalog.group_sq_norm(params, g).map(f64::sqrt))
            .collect::<Result<_>>()?,
        Scorer::Random => (0..k)
            .map(|g| SplitMix64::substream(cfg.seed, g as u64).next_f64())
            .collect(),
        other => {
            return Err(MedError::Config(format!(
                "scorer {} needs Fisher inputs",
                other.name()
            )))
        }
    };
    Ok(ScoreTable {
        kinds: catalog.groups().iter().map(|g| g.kind).collect(),
        blocks: catalog.groups().iter().map(|g| g.block).collect(),
        costs: catalog.groups().iter().map(|g| g.cost).collect(),
        q_per_dist: Vec::new(),
        d_zero: vec![0.0; k],
        d_reset: vec![0.0; k],
        q_dist: priority.clone(),
        priority,
    })
}

/// One ordered removal phase of a plan.
#[derive(Debug, Clone, Serialize)]
pub struct PrunePhase {
    pub label: String,
    pub kind: GroupKind,
    /// Group ids in removal order (lowest priority first).
    pub removals: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PruningPlan {
    pub phases: Vec<PrunePhase>,
    /// Head quota per block for the first head phase.
    pub head_quotas: Vec<usize>,
    /// Total parameters removed (sum of c_g).
    pub removed_params: usize,
    /// True when a budget was capped by min-retention (the plateau).
    pub plateau: bool,
    pub notes: Vec<String>,
}

impl PruningPlan {
    pub fn all_removals(&self) -> Vec<usize> {
        self.phases.iter().flat_map(|p| p.removals.clone()).collect()
    }

    pub fn to_mask(&self, catalog: &GroupCatalog) -> GroupMask {
        let mut mask = GroupMask::all_active(catalog.len());
        for id in self.all_removals() {
            mask.deactivate(id);
        }
        mask
    }
}

/// Per-block head quotas: total = round(h * unprotected heads), allocated
/// proportionally to 1/S_l (inverse block sensitivity) with
/// largest-remainder rounding, capped by min-retention. `sensitivity`
/// None means uniform weights.
pub fn block_budgets(
    catalog: &GroupCatalog,
    head_sparsity: f64,
    protected: &[bool],
    min_heads: usize,
    sensitivity: Option<&[f64]>,
) -> Result<(Vec<usize>, bool)> {
    let nb = catalog.num_blocks();
    assert_eq!(protected.len(), nb);
    let heads = catalog.heads_per_block();
    let unprotected_total: usize = (0..nb).filter(|&b| !protected[b]).map(|b| heads[b]).sum();
    let target = (head_sparsity * unprotected_total as f64).round() as usize;

    let caps: Vec<usize> = (0..nb)
        .map(|b| {
            if protected[b] {
                0
            } else {
                heads[b].saturating_sub(min_heads)
            }
        })
        .collect();
    let weights: Vec<f64> = (0..nb)
        .map(|b| {
            if protected[b] || heads[b] == 0 {
                0.0
            } else {
                match sensitivity {
                    Some(s) => {
                        // blocks with higher sensitivity get smaller quotas
                        if s[b] > 0.0 {
                            1.0 / s[b]
                        } else {
                            f64::INFINITY
                        }
                    }
                    None => heads[b] as f64,
                }
            }
        })
        .collect();
    allocate_with_caps(target, &weights, &caps)
}

/// Largest-remainder allocation of `target` units over weighted bins with
/// per-bin caps. Returns quotas and whether the caps truncated the target.
fn allocate_with_caps(target: usize, weights: &[f64], caps: &[usize]) -> Result<(Vec<usize>, bool)> {
    let nb = weights.len();
    let mut quotas = vec![0usize; nb];
    if target == 0 {
        return Ok((quotas, false));
    }
    let cap_total: usize = caps.iter().sum();
    let capped = target > cap_total;
    let target = target.min(cap_total);
    if target == 0 {
        return Ok((quotas, capped));
    }

    // handle an infinite-weight bin (zero sensitivity): give it everything
    // up to its cap, then re-run on the rest
    let finite_weights: Vec<f64> = weights
        .iter()
        .map(|&w| if w.is_finite() { w } else { 0.0 })
        .collect();
    let has_inf = weights.iter().any(|w| w.is_infinite());
    if has_inf {
        let mut remaining = target;
        for b in 0..nb {
            if weights[b].is_infinite() {
                let take = remaining.min(caps[b]);
                quotas[b] = take;
                remaining -= take;
            }
        }
        if remaining > 0 {
            let reduced_caps: Vec<usize> = (0..nb)
                .map(|b| if weights[b].is_infinite() { 0 } else { caps[b] })
                .collect();
            let (rest, _) = allocate_with_caps(remaining, &finite_weights, &reduced_caps)?;
            for b in 0..nb {
                quotas[b] += rest[b];
            }
        }
        return Ok((quotas, capped));
    }

    let wsum: f64 = finite_weights.iter().sum();
    if wsum <= 0.0 {
        return Err(MedError::InfeasiblePlan(
            "no unprotected block can absorb the head budget".into(),
        ));
    }
    let shares: Vec<f64> = finite_weights
        .iter()
        .map(|&w| w / wsum * target as f64)
        .collect();
    let mut rema: Vec<(usize, f64)> = Vec::with_capacity(nb);
    let mut assigned = 0usize;
    for b in 0..nb {
        let q = (shares[b].floor() as usize).min(caps[b]);
        quotas[b] = q;
        assigned += q;
        rema.push((b, shares[b] - shares[b].floor()));
    }
    // distribute the remainder by largest fractional part, ties by index
    rema.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut i = 0;
    while assigned < target {
        let mut progressed = false;
        for _ in 0..nb {
            let b = rema[i % nb].0;
            i += 1;
            if quotas[b] < caps[b] {
                quotas[b] += 1;
                assigned += 1;
                progressed = true;
                break;
            }
        }
        if !progressed {
            break;
        }
    }
    Ok((quotas, capped))
}

/// Pooled block sensitivities S_l = sum_{i in block l} F_i from a
/// pi-weighted Fisher map.
pub fn block_sensitivities(fisher: &FisherMap, num_blocks: usize) -> Vec<f64> {
    (0..num_blocks)
        .map(|b| fisher.prefix_sum(&format!("enc.block{b:02}.")))
        .collect()
}

/// Sorted candidate list (priority ascending, id ascending) filtered by a
/// predicate.
fn sorted_candidates(
    scores: &ScoreTable,
    catalog: &GroupCatalog,
    pred: impl Fn(usize) -> bool,
) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..catalog.len()).filter(|&g| pred(g)).collect();
    ids.sort_by(|&a, &b| {
        scores.priority[a]
            .partial_cmp(&scores.priority[b])
            .expect("finite priorities")
            .then(a.cmp(&b))
    });
    ids
}

/// Head phase: lowest-priority heads per block, under the block quotas.
pub fn plan_heads(
    cfg: &PruneConfig,
    scores: &ScoreTable,
    catalog: &GroupCatalog,
    sensitivity: Option<&[f64]>,
) -> Result<(PrunePhase, Vec<usize>, bool)> {
    let nb = catalog.num_blocks();
    let protected = cfg.protected_set(nb);
    let (quotas, capped) = block_budgets(
        catalog,
        cfg.head_sparsity,
        &protected,
        cfg.min_heads,
        sensitivity,
    )?;
    let mut removals = Vec::new();
    for b in 0..nb {
        let cands = sorted_candidates(scores, catalog, |g| {
            catalog.groups()[g].kind == GroupKind::Head && catalog.groups()[g].block == b
        });
        removals.extend(cands.into_iter().take(quotas[b]));
    }
    // overall removal order: lowest priority first
    removals.sort_by(|&a, &b| {
        scores.priority[a]
            .partial_cmp(&scores.priority[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    Ok((
        PrunePhase {
            label: "heads".into(),
            kind: GroupKind::Head,
            removals,
        },
        quotas,
        capped,
    ))
}

/// MLP phase: global lowest-priority units across unprotected blocks,
/// respecting the per-block min-retention floor ceil(rho_min * units).
pub fn plan_mlps(
    cfg: &PruneConfig,
    scores: &ScoreTable,
    catalog: &GroupCatalog,
) -> Result<(PrunePhase, bool)> {
    let nb = catalog.num_blocks();
    let protected = cfg.protected_set(nb);
    plan_mlps_subset(cfg, scores, catalog, cfg.mlp_sparsity, |b| !protected[b])
}

fn plan_mlps_subset(
    cfg: &PruneConfig,
    scores: &ScoreTable,
    catalog: &GroupCatalog,
    sparsity: f64,
    block_in_scope: impl Fn(usize) -> bool,
) -> Result<(PrunePhase, bool)> {
    let nb = catalog.num_blocks();
    let units = catalog.mlp_per_block();
    let total: usize = (0..nb).filter(|&b| block_in_scope(b)).map(|b| units[b]).sum();
    let target = (sparsity * total as f64).round() as usize;
    let floors: Vec<usize> = (0..nb)
        .map(|b| (cfg.min_mlp_frac * units[b] as f64).ceil() as usize)
        .collect();
    let max_remove: Vec<usize> = (0..nb).map(|b| units[b].saturating_sub(floors[b])).collect();

    let cands = sorted_candidates(scores, catalog, |g| {
        scores.kinds[g] == GroupKind::Mlp && block_in_scope(scores.blocks[g])
    });
    let mut removed_per_block = vec![0usize; nb];
    let mut removals = Vec::new();
    for g in cands {
        if removals.len() == target {
            break;
        }
        let b = scores.blocks[g];
        if removed_per_block[b] < max_remove[b] {
            removed_per_block[b] += 1;
            removals.push(g);
        }
    }
    let capped = removals.len() < target;
    Ok((
        PrunePhase {
            label: "mlps".into(),
            kind: GroupKind::Mlp,
            removals,
        },
        capped,
    ))
}

/// Build the full cascade plan from one score table (reuse-mode). The
/// sequential mode appends a conservative second pass (h/2, m/2) over the
/// previously protected blocks.
pub fn plan_cascade(
    cfg: &PruneConfig,
    scores: &ScoreTable,
    catalog: &GroupCatalog,
    sensitivity: Option<&[f64]>,
) -> Result<PruningPlan> {
    cfg.validate(catalog.num_blocks())?;
    if scores.len() != catalog.len() {
        return Err(MedError::Config(format!(
            "score table covers {} groups, catalog has {}",
            scores.len(),
            catalog.len()
        )));
    }
    let (head_phase, quotas, head_capped) = plan_heads(cfg, scores, catalog, sensitivity)?;
    let (mlp_phase, mlp_capped) = plan_mlps(cfg, scores, catalog)?;
    let mut phases = vec![head_phase, mlp_phase];
    let mut notes = Vec::new();
    let mut plateau = head_capped || mlp_capped;
    if head_capped {
        notes.push("head budget truncated by min-retention".into());
    }
    if mlp_capped {
        notes.push("mlp budget truncated by min-retention (plateau)".into());
    }

    if cfg.mode == PruneMode::Sequential {
        let nb = catalog.num_blocks();
        let protected = cfg.protected_set(nb);
        let already: std::collections::HashSet<usize> =
            phases.iter().flat_map(|p| p.removals.clone()).collect();
        // second pass: previously protected blocks only, half sparsities
        let sub_cfg = PruneConfig {
            head_sparsity: cfg.head_sparsity / 2.0,
            ..cfg.clone()
        };
        let none_protected = vec![false; nb];
        let caps: Vec<usize> = (0..nb)
            .map(|b| {
                if protected[b] {
                    catalog.heads_per_block()[b].saturating_sub(cfg.min_heads)
                } else {
                    0
                }
            })
            .collect();
        let prot_heads: usize = (0..nb)
            .filter(|&b| protected[b])
            .map(|b| catalog.heads_per_block()[b])
            .sum();
        let target2 = (sub_cfg.head_sparsity * prot_heads as f64).round() as usize;
        let weights: Vec<f64> = (0..nb)
            .map(|b| {
                if !protected[b] {
                    0.0
                } else {
                    match sensitivity {
                        Some(s) if s[b] > 0.0 => 1.0 / s[b],
                        Some(_) => f64::INFINITY,
                        None => catalog.heads_per_block()[b] as f64,
                    }
                }
            })
            .collect();
        let (quotas2, capped2) = allocate_with_caps(target2, &weights, &caps)?;
        let mut head2 = Vec::new();
        for b in 0..nb {
            let cands = sorted_candidates(scores, catalog, |g| {
                scores.kinds[g] == GroupKind::Head
                    && scores.blocks[g] == b
                    && !already.contains(&g)
            });
            head2.extend(cands.into_iter().take(quotas2[b]));
        }
        head2.sort_by(|&a, &b| {
            scores.priority[a]
                .partial_cmp(&scores.priority[b])
                .unwrap()
                .then(a.cmp(&b))
        });
        phases.push(PrunePhase {
            label: "heads-second-pass".into(),
            kind: GroupKind::Head,
            removals: head2,
        });
        let (mut mlp2, capped3) = plan_mlps_subset(
            &sub_cfg,
            scores,
            catalog,
            cfg.mlp_sparsity / 2.0,
            |b| protected[b],
        )?;
        mlp2.removals.retain(|g| !already.contains(g));
        mlp2.label = "mlps-second-pass".into();
        phases.push(mlp2);
        plateau = plateau || capped2 || capped3;
        let _ = none_protected;
    }

    let removed_params: usize = phases
        .iter()
        .flat_map(|p| &p.removals)
        .map(|&g| catalog.groups()[g].cost)
        .sum();
    Ok(PruningPlan {
        phases,
        head_quotas: quotas,
        removed_params,
        plateau,
        notes,
    })
}

/// Score table serialization. Columns are fixed:
/// group_id,kind,block,c_g,delta_zero,delta_reset,q_dist,priority,pruned,phase
pub fn score_table_csv(scores: &ScoreTable, plan: Option<&PruningPlan>) -> String {
    let mut pruned = vec![None::<&str>; scores.len()];
    if let Some(plan) = plan {
        for phase in &plan.phases {
            for &g in &phase.removals {
                pruned[g] = Some(&phase.label);
            }
        }
    }
    let mut out = String::from(
        "group_id,kind,block,c_g,delta_zero,delta_reset,q_dist,priority,pruned,phase\n",
    );
    for g in 0..scores.len() {
        let kind = match scores.kinds[g] {
            GroupKind::Head => "head",
            GroupKind::Mlp => "mlp",
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            g,
            kind,
            scores.blocks[g],
            scores.costs[g],
            scores.d_zero[g],
            scores.d_reset[g],
            scores.q_dist[g],
            scores.priority[g],
            u8::from(pruned[g].is_some()),
            pruned[g].unwrap_or("")
        ));
    }
    out
}
