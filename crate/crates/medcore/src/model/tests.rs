use super::*;
use crate::data::{generate, DistributionSpec};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use std::collections::HashSet;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 4,
        embed_dim: 16,
        num_blocks: 2,
        heads_per_block: 2,
        mlp_hidden: 8,
        decoder_hidden: 8,
        ..ModelConfig::default()
    }
}

fn sample_input(config: &ModelConfig, seed: u64) -> crate::data::Sample {
    generate(&DistributionSpec::base(), config.image_size, 2, seed, 1)
        .unwrap()
        .remove(0)
}

#[test]
fn default_config_group_count() {
    let config = ModelConfig::default();
    let params = build_model(&config, 1).unwrap();
    let catalog = GroupCatalog::build(&params, &config).unwrap();
    // K = L*H + L*mlp_hidden = 16 + 512
    assert_eq!(catalog.len(), 528);
}

#[test]
fn minimal_config_has_two_groups() {
    let config = ModelConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 4,
        num_blocks: 1,
        heads_per_block: 1,
        mlp_hidden: 1,
        decoder_hidden: 2,
        ..ModelConfig::default()
    };
    let params = build_model(&config, 1).unwrap();
    let catalog = GroupCatalog::build(&params, &config).unwrap();
    assert_eq!(catalog.len(), 2);
}

#[test]
fn same_seed_builds_identical_params() {
    let config = tiny_config();
    let a = build_model(&config, 42).unwrap();
    let b = build_model(&config, 42).unwrap();
    assert_eq!(a, b);
    let c = build_model(&config, 43).unwrap();
    assert_ne!(a, c);
}

#[test]
fn invalid_config_is_rejected() {
    let bad = ModelConfig {
        embed_dim: 10,
        heads_per_block: 4,
        ..ModelConfig::default()
    };
    assert!(build_model(&bad, 0).is_err());
}

#[test]
fn groups_partition_pruneable_parameters() {
    let config = tiny_config();
    let params = build_model(&config, 7).unwrap();
    let catalog = GroupCatalog::build(&params, &config).unwrap();

    // coverage bitmap per tensor: every index of a member tensor that is
    // pruneable must be hit exactly once across all groups
    let mut coverage: std::collections::BTreeMap<String, Vec<u32>> = params
        .iter()
        .map(|(n, t)| (n.clone(), vec![0u32; t.len()]))
        .collect();
    for g in catalog.groups() {
        for m in &g.members {
            let dims = params.get(&m.tensor).unwrap().dims().to_vec();
            let cov = coverage.get_mut(&m.tensor).unwrap();
            m.for_each_index(&dims, |i| cov[i] += 1);
        }
    }
    let mut covered_total = 0usize;
    for (name, cov) in &coverage {
        let hits: u32 = cov.iter().sum();
        let max = cov.iter().max().copied().unwrap_or(0);
        assert!(max <= 1, "{name}: parameter covered twice");
        covered_total += hits as usize;
        // decoder/prompt tensors must be untouched
        if role_of(name) != Role::Encoder {
            assert_eq!(hits, 0, "{name} must not be pruneable");
        }
        // qkv/wo/mlp tensors must be fully covered
        if name.contains("attn.w") || name.contains("attn.b") || name.contains("mlp.") {
            if !name.contains("bo") && !name.contains("mlp.b2") {
                assert_eq!(hits as usize, cov.len(), "{name} not fully covered");
            }
        }
    }
    assert_eq!(covered_total, catalog.total_cost());
}

#[test]
fn head_group_cost_matches_slice_audit() {
    // default config: c_g = 3*(d/H)*d + 3*(d/H) + (d/H)*d = 4144
    let config = ModelConfig::default();
    let params = build_model(&config, 3).unwrap();
    let catalog = GroupCatalog::build(&params, &config).unwrap();
    let head = &catalog.groups()[0];
    assert_eq!(head.kind, GroupKind::Head);
    assert_eq!(head.cost, 4144);
    // audit against actual tensor sizes
    let mut audited = 0usize;
    for m in &head.members {
        audited += m.count(params.get(&m.tensor).unwrap().dims());
    }
    assert_eq!(audited, 4144);
}

#[test]
fn forward_all_ones_mask_and_degenerate_masks_are_finite() {
    let config = tiny_config();
    let params = build_model(&config, 11).unwrap();
    let catalog = GroupCatalog::build(&params, &config).unwrap();
    let sample = sample_input(&config, 1);

    let mask = GroupMask::all_active(catalog.len());
    let fp = forward(&params, &config, &mask, &sample.image, &sample.bbox).unwrap();
    assert_eq!(fp.logit_tensor().dims(), &[16, 16]);

    // masking every head leaves the MLP+residual path; output stays finite
    let mut no_heads = GroupMask::all_active(catalog.len());
    for g in catalog.groups() {
        if g.kind == GroupKind::Head {
            no_heads.deactivate(g.id);
        }
    }
    let fp2 = forward(&params, &config, &no_heads, &sample.image, &sample.bbox).unwrap();
    assert!(fp2.logit_tensor().data().iter().all(|v| v.is_finite()));
}

#[test]
fn forward_is_deterministic() {
    let config = tiny_config();
    let params = build_model(&config, 19).unwrap();
    let catalog = GroupCatalog::build(&params, &config).unwrap();
    let mask = GroupMask::all_active(catalog.len());
    let sample = sample_input(&config, 2);
    let a = forward(&params, &config, &mask, &sample.image, &sample.bbox).unwrap();
    let b = forward(&params, &config, &mask, &sample.image, &sample.bbox).unwrap();
    assert_eq!(a.logit_tensor(), b.logit_tensor());
}

#[test]
fn zero_intervention_is_idempotent_and_local() {
    let config = tiny_config();
    let params = build_model(&config, 23).unwrap();
    let catalog = GroupCatalog::build(&params, &config).unwrap();
    let g = 1;
    let once = apply_group_intervention(&params, &catalog, g, InterventionKind::Zero, None).unwrap();
    let twice = apply_group_intervention(&once, &catalog, g, InterventionKind::Zero, None).unwrap();
    assert_eq!(once, twice);

    // members zeroed, everything else bit-identical
    let group = catalog.group(g).unwrap();
    let member_indices: HashSet<(String, usize)> = {
        let mut s = HashSet::new();
        for m in &group.members {
            let dims = params.get(&m.tensor).unwrap().dims().to_vec();
            m.for_each_index(&dims, |i| {
                s.insert((m.tensor.clone(), i));
            });
        }
        s
    };
    for (name, before) in params.iter() {
        let after = once.get(name).unwrap();
        for i in 0..before.len() {
            if member_indices.contains(&(name.clone(), i)) {
                assert_eq!(after.data()[i], 0.0);
            } else {
                assert_eq!(after.data()[i].to_bits(), before.data()[i].to_bits());
            }
        }
    }
}

#[test]
fn reset_with_self_reference_is_identity() {
    let config = tiny_config();
    let params = build_model(&config, 29).unwrap();
    let catalog = GroupCatalog::build(&params, &config).unwrap();
    let out =
        apply_group_intervention(&params, &catalog, 3, InterventionKind::Reset, Some(&params))
            .unwrap();
    assert_eq!(out, params);
}

#[test]
fn zero_on_single_param_group() {
    // a hand-built catalog exercises the 1-parameter group case directly
    let mut params = ParamStore::new();
    params.insert("enc.block00.mlp.b1", Tensor::from_parts(vec![2], vec![3.0, 5.0]));
    let catalog_group = Group {
        id: 0,
        kind: GroupKind::Mlp,
        block: 0,
        index: 0,
        cost: 1,
        members: vec![Member {
            tensor: "enc.block00.mlp.b1".into(),
            region: Region::Flat { start: 0, end: 1 },
        }],
    };
    let catalog = GroupCatalog::from_groups(vec![catalog_group], 1, vec![0], vec![2]);
    let out = apply_group_intervention(&params, &catalog, 0, InterventionKind::Zero, None).unwrap();
    assert_eq!(out.get("enc.block00.mlp.b1").unwrap().data(), &[0.0, 5.0]);
}

#[test]
fn unknown_group_is_an_error() {
    let config = tiny_config();
    let params = build_model(&config, 31).unwrap();
    let catalog = GroupCatalog::build(&params, &config).unwrap();
    assert!(apply_group_intervention(&params, &catalog, 999, InterventionKind::Zero, None).is_err());
}

#[test]
fn remove_nothing_keeps_parameter_count() {
    let config = tiny_config();
    let params = build_model(&config, 37).unwrap();
    let catalog = GroupCatalog::build(&params, &config).unwrap();
    let (removed, new_catalog) = physically_remove(&params, &catalog, &config, &[]).unwrap();
    assert_eq!(removed.total_params(), params.total_params());
    assert_eq!(new_catalog.len(), catalog.len());
}

#[test]
fn removal_shrinks_by_exactly_group_cost() {
    let config = ModelConfig::default();
    let params = build_model(&config, 41).unwrap();
    let catalog = GroupCatalog::build(&params, &config).unwrap();
    let (removed, _) = physically_remove(&params, &catalog, &config, &[0]).unwrap();
    assert_eq!(params.total_params() - removed.total_params(), 4144);
}

#[test]
fn removing_every_head_of_a_block_is_rejected() {
    let config = tiny_config();
    let params = build_model(&config, 43).unwrap();
    let catalog = GroupCatalog::build(&params, &config).unwrap();
    let block0_heads: Vec<usize> = catalog
        .groups()
        .iter()
        .filter(|g| g.kind == GroupKind::Head && g.block == 0)
        .map(|g| g.id)
        .collect();
    assert!(physically_remove(&params, &catalog, &config, &block0_heads).is_err());
}

#[test]
fn masked_forward_equals_removed_forward() {
    // 5 random prune sets x 10 random inputs, max abs diff <= 1e-9
    let config = tiny_config();
    let params = build_model(&config, 47).unwrap();
    let catalog = GroupCatalog::build(&params, &config).unwrap();
    let mut rng = SplitMix64::new(4747);

    for trial in 0..5 {
        // random prune set keeping at least one group per block/kind
        let mut mask = GroupMask::all_active(catalog.len());
        let mut pruned = Vec::new();
        for b in 0..config.num_blocks {
            let heads: Vec<usize> = catalog
                .groups()
                .iter()
                .filter(|g| g.kind == GroupKind::Head && g.block == b)
                .map(|g| g.id)
                .collect();
            let mlps: Vec<usize> = catalog
                .groups()
                .iter()
                .filter(|g| g.kind == GroupKind::Mlp && g.block == b)
                .map(|g| g.id)
                .collect();
            for ids in [heads, mlps] {
                let n_remove = rng.next_below(ids.len() as u64) as usize; // keeps >= 1
                for &id in ids.iter().take(n_remove) {
                    mask.deactivate(id);
                    pruned.push(id);
                }
            }
        }
        let (removed, removed_catalog) =
            physically_remove(&params, &catalog, &config, &pruned).unwrap();
        let removed_cost: usize = pruned.iter().map(|&g| catalog.groups()[g].cost).sum();
        assert_eq!(
            params.total_params() - removed.total_params(),
            removed_cost,
            "trial {trial}: parameter delta mismatch"
        );
        let removed_mask = GroupMask::all_active(removed_catalog.len());

        for input in 0..10 {
            let sample = sample_input(&config, 1000 + input);
            let masked = forward(&params, &config, &mask, &sample.image, &sample.bbox).unwrap();
            let compact =
                forward(&removed, &config, &removed_mask, &sample.image, &sample.bbox).unwrap();
            let diff = masked.logit_tensor().max_abs_diff(compact.logit_tensor());
            assert!(diff <= 1e-9, "trial {trial} input {input}: diff {diff}");
        }
    }
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let config = tiny_config();
    let params = build_model(&config, 53).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.mckp");
    params.save(&path).unwrap();
    let loaded = ParamStore::load(&path).unwrap();
    assert_eq!(params.len(), loaded.len());
    for ((an, at), (bn, bt)) in params.iter().zip(loaded.iter()) {
        assert_eq!(an, bn);
        assert_eq!(at.dims(), bt.dims());
        assert!(at
            .data()
            .iter()
            .zip(bt.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn checkpoint_corruption_yields_distinct_errors() {
    let config = tiny_config();
    let params = build_model(&config, 59).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.mckp");
    params.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    // bad magic
    let mut bad = bytes.clone();
    bad[0] = b'X';
    let bad_path = dir.path().join("bad_magic.mckp");
    std::fs::write(&bad_path, &bad).unwrap();
    assert!(matches!(
        ParamStore::load(&bad_path),
        Err(MedError::BadMagic)
    ));

    // bad version
    let mut badv = bytes.clone();
    badv[4] = 9;
    let badv_path = dir.path().join("bad_version.mckp");
    std::fs::write(&badv_path, &badv).unwrap();
    assert!(matches!(
        ParamStore::load(&badv_path),
        Err(MedError::BadVersion(_))
    ));

    // truncated
    let trunc_path = dir.path().join("trunc.mckp");
    std::fs::write(&trunc_path, &bytes[..bytes.len() - 9]).unwrap();
    assert!(matches!(
        ParamStore::load(&trunc_path),
        Err(MedError::Truncated(_))
    ));

    // dim overflow: rewrite the first entry's rank/dims with absurd values
    let mut overflow = bytes[..16].to_vec();
    overflow.extend_from_slice(&(4u64).to_le_bytes()); // name_len
    overflow.extend_from_slice(b"test");
    overflow.extend_from_slice(&(2u64).to_le_bytes()); // rank
    overflow.extend_from_slice(&u64::MAX.to_le_bytes());
    overflow.extend_from_slice(&(2u64).to_le_bytes());
    let of_path = dir.path().join("overflow.mckp");
    std::fs::write(&of_path, &overflow).unwrap();
    assert!(matches!(
        ParamStore::load(&of_path),
        Err(MedError::DimOverflow(_))
    ));
}

#[test]
fn alignment_check_across_checkpoints() {
    let config = tiny_config();
    let a = build_model(&config, 61).unwrap();
    let b = build_model(&config, 62).unwrap();
    a.check_aligned(&b).unwrap();

    let other = build_model(
        &ModelConfig {
            mlp_hidden: 12,
            ..tiny_config()
        },
        61,
    )
    .unwrap();
    assert!(a.check_aligned(&other).is_err());
}

#[test]
fn full_model_gradient_check_on_8x8_input() {
    // central finite differences through the whole architecture
    let config = ModelConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 8,
        num_blocks: 1,
        heads_per_block: 2,
        mlp_hidden: 4,
        decoder_hidden: 4,
        ..ModelConfig::default()
    };
    let params = build_model(&config, 67).unwrap();
    let catalog = GroupCatalog::build(&params, &config).unwrap();
    let mask = GroupMask::all_active(catalog.len());
    let sample = sample_input(&config, 5);

    // h = 1e-4: gradients at random init are ~1e-8, so smaller steps put
    // the central difference inside f64 roundoff
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let loss_of = |p: &ParamStore| -> f64 {
        let mut fp = forward(p, &config, &mask, &sample.image, &sample.bbox).unwrap();
        let l = crate::losses::seg_loss(&mut fp.tape, fp.logits, &sample.mask, 1e-6).unwrap();
        fp.tape.value(l).scalar_value()
    };
    let mut fp = forward(&params, &config, &mask, &sample.image, &sample.bbox).unwrap();
    let loss = crate::losses::seg_loss(&mut fp.tape, fp.logits, &sample.mask, 1e-6).unwrap();
    let grads = fp.tape.backward(loss).unwrap();

    let mut rng = SplitMix64::new(777);
    for (name, tensor) in params.iter() {
        if is_frozen(name) {
            continue;
        }
        let analytic = grads.grad(fp.binding.id(name)).unwrap();
        // probe up to 4 random coordinates per tensor
        for _ in 0..4.min(tensor.len()) {
            let i = rng.next_below(tensor.len() as u64) as usize;
            let mut probe = params.clone();
            probe.get_mut(name).unwrap().data_mut()[i] += h;
            let up = loss_of(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] -= 2.0 * h;
            let down = loss_of(&probe);
            let central = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4, "max rel error {worst}");
}

#[test]
fn flops_estimate_decreases_after_removal() {
    let config = ModelConfig::default();
    let params = build_model(&config, 71).unwrap();
    let catalog = GroupCatalog::build(&params, &config).unwrap();
    let before = flops_estimate(&params, &config).unwrap();
    let (removed, _) = physically_remove(&params, &catalog, &config, &[0, 1]).unwrap();
    let after = flops_estimate(&removed, &config).unwrap();
    assert!(after < before);
}
