use super::*;
use crate::model::{build_model, GroupCatalog, ModelConfig};
use crate::rng::SplitMix64;

fn default_setup() -> (ModelConfig, crate::model::ParamStore, GroupCatalog) {
    let config = ModelConfig::default();
    let params = build_model(&config, 1).unwrap();
    let catalog = GroupCatalog::build(&params, &config).unwrap();
    (config, params, catalog)
}

fn synthetic_costs(catalog: &GroupCatalog, dists: usize, seed: u64) -> InterventionCosts {
    let mut rng = SplitMix64::new(seed);
    let mut costs = InterventionCosts::default();
    for _ in 0..dists {
        costs.zero.push((0..catalog.len()).map(|_| rng.next_f64()).collect());
        costs.reset.push((0..catalog.len()).map(|_| rng.next_f64()).collect());
    }
    costs
}

fn uniform_pi(r: usize) -> Vec<f64> {
    vec![1.0 / r as f64; r]
}

#[test]
fn fuse_scores_alpha_extremes_and_midpoint() {
    let (_, _, catalog) = default_setup();
    let costs = synthetic_costs(&catalog, 1, 7);
    let q1 = fuse_scores(&costs, &AlphaSetting::Scalar(1.0), &catalog).unwrap();
    assert_eq!(q1[0], costs.zero[0]);
    let q0 = fuse_scores(&costs, &AlphaSetting::Scalar(0.0), &catalog).unwrap();
    assert_eq!(q0[0], costs.reset[0]);

    let mut half = InterventionCosts::default();
    half.zero.push(vec![2.0; catalog.len()]);
    half.reset.push(vec![4.0; catalog.len()]);
    let qh = fuse_scores(&half, &AlphaSetting::Scalar(0.5), &catalog).unwrap();
    assert!(qh[0].iter().all(|&v| v == 3.0));
}

#[test]
fn aggregate_mean_plus_population_variance() {
    // Q = (1, 3), pi uniform, beta = 1 -> 2 + 1 = 3
    let q = vec![vec![1.0], vec![3.0]];
    let out = aggregate_distributions(&q, &uniform_pi(2), 1.0);
    assert_eq!(out, vec![3.0]);

    // beta = 0 -> plain weighted mean
    let out0 = aggregate_distributions(&q, &uniform_pi(2), 0.0);
    assert_eq!(out0, vec![2.0]);

    // identical Q across r -> mean regardless of beta
    let qsame = vec![vec![5.0], vec![5.0], vec![5.0]];
    let o = aggregate_distributions(&qsame, &uniform_pi(3), 7.0);
    assert_eq!(o, vec![5.0]);
}

#[test]
fn priority_closed_forms_and_scaling() {
    // Q = 2, c = 4, eps = 0, tau = 1 -> 0.5
    assert_eq!(priorities(&[2.0], &[4], 1.0, 0.0), vec![0.5]);
    // tau = 0 -> P == Q
    let q = vec![0.3, 1.7, 0.9];
    assert_eq!(priorities(&q, &[10, 20, 30], 0.0, 0.0), q);
    // scaling every cost by k multiplies P by k^-tau: ranking unchanged
    let costs: Vec<usize> = vec![4, 8, 16];
    let p1 = priorities(&q, &costs, 1.0, 0.0);
    let scaled: Vec<usize> = costs.iter().map(|c| c * 3).collect();
    let p3 = priorities(&q, &scaled, 1.0, 0.0);
    for (a, b) in p1.iter().zip(&p3) {
        assert!((b * 3.0 - a).abs() < 1e-12);
    }
}

#[test]
fn block_budgets_split_evenly_for_equal_sensitivity() {
    // 2 unprotected blocks, equal S, 4 heads pruned -> 2 each
    let config = ModelConfig {
        num_blocks: 2,
        ..ModelConfig::default()
    };
    let params = build_model(&config, 2).unwrap();
    let catalog = GroupCatalog::build(&params, &config).unwrap();
    let protected = vec![false, false];
    let (quotas, capped) =
        block_budgets(&catalog, 0.5, &protected, 1, Some(&[3.0, 3.0])).unwrap();
    assert_eq!(quotas, vec![2, 2]);
    assert!(!capped);
}

#[test]
fn block_budgets_concentrate_away_from_dominant_block() {
    let config = ModelConfig {
        num_blocks: 2,
        ..ModelConfig::default()
    };
    let params = build_model(&config, 2).unwrap();
    let catalog = GroupCatalog::build(&params, &config).unwrap();
    let protected = vec![false, false];
    // block 0 enormously sensitive: quota concentrates on block 1 up to
    // its min-retention cap (4 heads - 1)
    let (quotas, _) =
        block_budgets(&catalog, 0.5, &protected, 1, Some(&[1e12, 1.0])).unwrap();
    assert_eq!(quotas[1], 3);
    assert_eq!(quotas[0] + quotas[1], 4);
}

#[test]
fn zero_sparsity_means_zero_quotas() {
    let (_, _, catalog) = default_setup();
    let protected = vec![false, false, false, true];
    let (quotas, capped) = block_budgets(&catalog, 0.0, &protected, 1, None).unwrap();
    assert!(quotas.iter().all(|&q| q == 0));
    assert!(!capped);
}

#[test]
fn empty_plan_for_zero_sparsities() {
    let (_, params, catalog) = default_setup();
    let cfg = PruneConfig {
        head_sparsity: 0.0,
        mlp_sparsity: 0.0,
        scorer: Scorer::Magnitude,
        ..PruneConfig::default()
    };
    let scores = baseline_score_table(Scorer::Magnitude, &cfg, &params, &catalog).unwrap();
    let plan = plan_cascade(&cfg, &scores, &catalog, None).unwrap();
    assert!(plan.all_removals().is_empty());
    assert_eq!(plan.removed_params, 0);
    assert!(!plan.plateau);
}

#[test]
fn removed_params_equals_sum_of_group_costs() {
    let (_, params, catalog) = default_setup();
    let cfg = PruneConfig {
        scorer: Scorer::Magnitude,
        ..PruneConfig::default()
    };
    let scores = baseline_score_table(Scorer::Magnitude, &cfg, &params, &catalog).unwrap();
    let plan = plan_cascade(&cfg, &scores, &catalog, None).unwrap();
    let expected: usize = plan
        .all_removals()
        .iter()
        .map(|&g| catalog.groups()[g].cost)
        .sum();
    assert_eq!(plan.removed_params, expected);
    assert!(plan.removed_params > 0);
}

#[test]
fn mlp_budget_plateaus_at_min_retention() {
    // default config: 4 blocks, last protected, 3*128 = 384 unprotected
    // units, rho_min = 0.05 -> floor ceil(6.4) = 7 per block, max
    // removable 121*3 = 363 < round(0.95*384) = 365 -> capped
    let (_, params, catalog) = default_setup();
    let base_cfg = PruneConfig {
        head_sparsity: 0.0,
        scorer: Scorer::Magnitude,
        ..PruneConfig::default()
    };
    let scores = baseline_score_table(Scorer::Magnitude, &base_cfg, &params, &catalog).unwrap();

    let plan_at = |m: f64| {
        let cfg = PruneConfig {
            mlp_sparsity: m,
            ..base_cfg.clone()
        };
        plan_cascade(&cfg, &scores, &catalog, None).unwrap()
    };
    let p95 = plan_at(0.95);
    assert!(p95.plateau);
    assert_eq!(p95.all_removals().len(), 363);
    // raising m further leaves the parameter count unchanged
    let p97 = plan_at(0.97);
    let p99 = plan_at(0.99);
    assert_eq!(p95.removed_params, p97.removed_params);
    assert_eq!(p95.removed_params, p99.removed_params);
    // m = 0.8 is feasible without the cap
    let p80 = plan_at(0.8);
    assert!(!p80.plateau);
    assert_eq!(p80.all_removals().len(), (0.8f64 * 384.0).round() as usize);
}

#[test]
fn one_time_mode_never_touches_protected_blocks() {
    let (_, params, catalog) = default_setup();
    let cfg = PruneConfig {
        head_sparsity: 0.8,
        mlp_sparsity: 0.9,
        scorer: Scorer::Magnitude,
        ..PruneConfig::default()
    };
    let scores = baseline_score_table(Scorer::Magnitude, &cfg, &params, &catalog).unwrap();
    let plan = plan_cascade(&cfg, &scores, &catalog, None).unwrap();
    let protected = cfg.protected_set(catalog.num_blocks());
    for g in plan.all_removals() {
        assert!(!protected[catalog.groups()[g].block], "group {g} protected");
    }
}

#[test]
fn sequential_mode_reenters_protected_blocks_conservatively() {
    let (_, params, catalog) = default_setup();
    let cfg = PruneConfig {
        head_sparsity: 0.5,
        mlp_sparsity: 0.5,
        mode: PruneMode::Sequential,
        scorer: Scorer::Magnitude,
        ..PruneConfig::default()
    };
    let scores = baseline_score_table(Scorer::Magnitude, &cfg, &params, &catalog).unwrap();
    let plan = plan_cascade(&cfg, &scores, &catalog, None).unwrap();
    assert_eq!(plan.phases.len(), 4);
    let protected = cfg.protected_set(catalog.num_blocks());
    // second passes touch only protected blocks, first passes only others
    for phase in &plan.phases {
        for &g in &phase.removals {
            let in_protected = protected[catalog.groups()[g].block];
            assert_eq!(in_protected, phase.label.contains("second-pass"));
        }
    }
    // conservative: protected-block head removals use h/2
    let second_heads = &plan.phases[2];
    let prot_heads: usize = (0..catalog.num_blocks())
        .filter(|&b| protected[b])
        .map(|b| catalog.heads_per_block()[b])
        .sum();
    assert_eq!(
        second_heads.removals.len(),
        (0.25 * prot_heads as f64).round() as usize
    );
}

#[test]
fn increasing_head_sparsity_never_prunes_fewer_heads() {
    let (_, params, catalog) = default_setup();
    let base_cfg = PruneConfig {
        scorer: Scorer::Magnitude,
        ..PruneConfig::default()
    };
    let scores = baseline_score_table(Scorer::Magnitude, &base_cfg, &params, &catalog).unwrap();
    let mut prev = 0usize;
    for h in [0.0, 0.1, 0.25, 0.3, 0.5, 0.75, 0.9] {
        let cfg = PruneConfig {
            head_sparsity: h,
            ..base_cfg.clone()
        };
        let plan = plan_cascade(&cfg, &scores, &catalog, None).unwrap();
        let heads = plan.phases[0].removals.len();
        assert!(heads >= prev, "h={h}: {heads} < {prev}");
        prev = heads;
    }
}

#[test]
fn plans_are_deterministic_with_id_tiebreak() {
    let (_, params, catalog) = default_setup();
    let cfg = PruneConfig {
        scorer: Scorer::Magnitude,
        tau: 0.0,
        ..PruneConfig::default()
    };
    // constant-score table: all priorities tie, removal order must be
    // ascending group id within each block/phase
    let k = catalog.len();
    let scores = ScoreTable {
        kinds: catalog.groups().iter().map(|g| g.kind).collect(),
        blocks: catalog.groups().iter().map(|g| g.block).collect(),
        costs: catalog.groups().iter().map(|g| g.cost).collect(),
        q_per_dist: Vec::new(),
        d_zero: vec![0.0; k],
        d_reset: vec![0.0; k],
        q_dist: vec![1.0; k],
        priority: vec![1.0; k],
    };
    let a = plan_cascade(&cfg, &scores, &catalog, None).unwrap();
    let b = plan_cascade(&cfg, &scores, &catalog, None).unwrap();
    assert_eq!(a.all_removals(), b.all_removals());
    for phase in &a.phases {
        let mut sorted = phase.removals.clone();
        sorted.sort_unstable();
        assert_eq!(phase.removals, sorted);
    }
    let _ = params;
}

#[test]
fn magnitude_baseline_puts_zero_group_last() {
    let (config, mut params, catalog) = default_setup();
    // zero out group 5's members
    let zeroed = crate::model::apply_group_intervention(
        &params,
        &catalog,
        5,
        crate::model::InterventionKind::Zero,
        None,
    )
    .unwrap();
    params = zeroed;
    let cfg = PruneConfig::default();
    let scores = baseline_score_table(Scorer::Magnitude, &cfg, &params, &catalog).unwrap();
    assert_eq!(scores.priority[5], 0.0);
    let min = scores
        .priority
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    assert_eq!(min, 0.0);
    let _ = config;
}

#[test]
fn random_baseline_is_reproducible_and_seed_sensitive() {
    let (_, params, catalog) = default_setup();
    let cfg = PruneConfig {
        seed: 9,
        ..PruneConfig::default()
    };
    let a = baseline_score_table(Scorer::Random, &cfg, &params, &catalog).unwrap();
    let b = baseline_score_table(Scorer::Random, &cfg, &params, &catalog).unwrap();
    assert_eq!(a.priority, b.priority);
    let other = PruneConfig {
        seed: 10,
        ..PruneConfig::default()
    };
    let c = baseline_score_table(Scorer::Random, &other, &params, &catalog).unwrap();
    assert_ne!(a.priority, c.priority);
}

#[test]
fn zero_only_equals_medcore_with_alpha_one() {
    let (_, _, catalog) = default_setup();
    let costs = synthetic_costs(&catalog, 3, 21);
    let pi = uniform_pi(3);
    let cfg = PruneConfig::default();
    let zero_only = score_table(Scorer::ZeroOnly, &cfg, &catalog, &costs, &pi).unwrap();
    let forced = PruneConfig {
        alpha: AlphaSetting::Scalar(1.0),
        ..cfg
    };
    let medcore_a1 = score_table(Scorer::Medcore, &forced, &catalog, &costs, &pi).unwrap();
    assert_eq!(zero_only.q_dist, medcore_a1.q_dist);
    assert_eq!(zero_only.priority, medcore_a1.priority);
}

#[test]
fn no_variance_equals_medcore_with_beta_zero() {
    let (_, _, catalog) = default_setup();
    let costs = synthetic_costs(&catalog, 3, 22);
    let pi = uniform_pi(3);
    let cfg = PruneConfig::default();
    let nv = score_table(Scorer::NoVariance, &cfg, &catalog, &costs, &pi).unwrap();
    let forced = PruneConfig { beta: 0.0, ..cfg };
    let mc = score_table(Scorer::Medcore, &forced, &catalog, &costs, &pi).unwrap();
    assert_eq!(nv.q_dist, mc.q_dist);
}

#[test]
fn score_table_rejects_unnormalized_pi() {
    let (_, _, catalog) = default_setup();
    let costs = synthetic_costs(&catalog, 2, 23);
    let cfg = PruneConfig::default();
    assert!(score_table(Scorer::Medcore, &cfg, &catalog, &costs, &[0.7, 0.7]).is_err());
}

#[test]
fn csv_has_fixed_columns_and_plan_annotations() {
    let (_, params, catalog) = default_setup();
    let cfg = PruneConfig {
        scorer: Scorer::Magnitude,
        ..PruneConfig::default()
    };
    let scores = baseline_score_table(Scorer::Magnitude, &cfg, &params, &catalog).unwrap();
    let plan = plan_cascade(&cfg, &scores, &catalog, None).unwrap();
    let csv = score_table_csv(&scores, Some(&plan));
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "group_id,kind,block,c_g,delta_zero,delta_reset,q_dist,priority,pruned,phase"
    );
    assert_eq!(csv.lines().count(), catalog.len() + 1);
    let pruned_rows = csv.lines().filter(|l| l.contains(",1,heads") || l.ends_with(",1,mlps")).count();
    assert!(pruned_rows > 0);
}

#[test]
fn default_protection_scales_with_depth() {
    let cfg = PruneConfig::default();
    assert_eq!(cfg.protected_set(4), vec![false, false, false, true]);
    assert_eq!(cfg.protected_set(2), vec![false, true]);
    let twelve = cfg.protected_set(12);
    assert_eq!(twelve.iter().filter(|&&p| p).count(), 2);
    assert!(twelve[10] && twelve[11]);
}