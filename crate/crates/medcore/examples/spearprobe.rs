use medcore::data::{generate, DistributionSpec, Sample};
use medcore::fisher::*;
use medcore::losses::LossWeights;
use medcore::model::*;
use medcore::scoring::*;
use medcore::stats::spearman;
use medcore::train::*;
use std::time::Instant;

fn mixture(specs: &[DistributionSpec], size: usize, seed: u64, n: usize) -> Vec<Sample> {
    let mut out = Vec::new();
    let per = n / specs.len() + 1;
    let lists: Vec<Vec<Sample>> = specs.iter().map(|s| generate(s, size, 2, seed, per).unwrap()).collect();
    for i in 0..per {
        for l in &lists {
            if out.len() < n { out.push(l[i].clone()); }
        }
    }
    out
}

fn main() {
    let t0 = Instant::now();
    let config = ModelConfig {
        image_size: 16, patch_size: 4, embed_dim: 16, num_blocks: 2,
        heads_per_block: 2, mlp_hidden: 8, decoder_hidden: 8,
        ..ModelConfig::default()
    };
    let adapted_specs = DistributionSpec::default_adapted();
    let w = LossWeights::default();
    let mut zero_rhos = vec![];
    let mut reset_rhos = vec![];
    for seed in 0..5u64 {
        let base_data = generate(&DistributionSpec::base(), 16, 2, 1000 + seed, 128).unwrap();
        let adapt_data = mixture(&adapted_specs, 16, 2000 + seed, 128);
        let calib = mixture(&adapted_specs, 16, 3000 + seed, 64);

        let init = build_model(&config, seed).unwrap();
        let tcfg = TrainConfig { steps: 400, batch: 8, lr: 2e-3, seed, ..TrainConfig::default() };
        let base = train(&init, &config, &base_data, &tcfg, &w, None).unwrap().params;
        let tcfg2 = TrainConfig { steps: 200, batch: 8, lr: 2e-4, seed, ..TrainConfig::default() };
        let base = train(&base, &config, &base_data, &tcfg2, &w, None).unwrap().params;
        let acfg = TrainConfig { steps: 300, batch: 8, lr: 1e-3, loss: TrainLoss::Boundary, seed, ..TrainConfig::default() };
        let adapted = adapt(&base, &config, &adapt_data, &acfg, &w, None).unwrap().params;
        let acfg2 = TrainConfig { steps: 300, batch: 8, lr: 1e-4, loss: TrainLoss::Boundary, seed, ..TrainConfig::default() };
        let adapted = adapt(&adapted, &config, &adapt_data, &acfg2, &w, None).unwrap().params;

        let catalog = GroupCatalog::build(&adapted, &config).unwrap();
        let fm = estimate_fisher(&adapted, &config, &calib, FisherLoss::Boundary, &w).unwrap();
        let fs = estimate_fisher(&base, &config, &calib, FisherLoss::Boundary, &w).unwrap();
        let cross = cross_fisher(&fm, &fs, 1e-12).unwrap();
        let zero_approx = approx_zero_cost(&fm, &adapted, &catalog).unwrap();
        let reset_approx = approx_reset_cost(&cross, &adapted, &base, &catalog).unwrap();

        let zero_oracle = oracle_all_groups(&adapted, &config, None, &catalog, &calib,
            InterventionKind::Zero, FisherLoss::Seg, &w).unwrap();
        let reset_oracle = oracle_all_groups(&adapted, &config, Some(&base), &catalog, &calib,
            InterventionKind::Reset, FisherLoss::Seg, &w).unwrap();

        // heads only per criterion
        let head_ids: Vec<usize> = catalog.groups().iter().filter(|g| g.kind == GroupKind::Head).map(|g| g.id).collect();
        let pick = |v: &[f64], ids: &[usize]| ids.iter().map(|&i| v[i]).collect::<Vec<_>>();
        println!("  head zero approx {:?}", pick(&zero_approx, &head_ids));
        println!("  head zero oracle {:?}", pick(&zero_oracle, &head_ids));
        println!("  head reset approx {:?}", pick(&reset_approx, &head_ids));
        println!("  head reset oracle {:?}", pick(&reset_oracle, &head_ids));
        let rho_z_head = spearman(&pick(&zero_approx, &head_ids), &pick(&zero_oracle, &head_ids)).unwrap();
        let rho_r_head = spearman(&pick(&reset_approx, &head_ids), &pick(&reset_oracle, &head_ids)).unwrap();
        let rho_z_all = spearman(&zero_approx, &zero_oracle).unwrap();
        let rho_r_all = spearman(&reset_approx, &reset_oracle).unwrap();
        println!("seed {seed}: zero head rho {rho_z_head:.3} (all {rho_z_all:.3}), reset head rho {rho_r_head:.3} (all {rho_r_all:.3})");
        zero_rhos.push(rho_z_head);
        reset_rhos.push(rho_r_head);
    }
    zero_rhos.sort_by(|a,b| a.partial_cmp(b).unwrap());
    reset_rhos.sort_by(|a,b| a.partial_cmp(b).unwrap());
    println!("median zero rho {:.3}, median reset rho {:.3}", zero_rhos[2], reset_rhos[2]);
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
