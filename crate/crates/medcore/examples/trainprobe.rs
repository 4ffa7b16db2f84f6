use medcore::data::{generate, DistributionSpec, Mask, Sample};
use medcore::losses::LossWeights;
use medcore::metrics::dice_iou;
use medcore::model::*;
use medcore::train::*;
use std::time::Instant;

fn mixture(specs: &[DistributionSpec], size: usize, seed: u64, n: usize) -> Vec<Sample> {
    // round-robin over adapted specs
    let mut out = Vec::new();
    let per = n / specs.len() + 1;
    let mut lists: Vec<Vec<Sample>> = specs
        .iter()
        .map(|s| generate(s, size, 2, seed, per).unwrap())
        .collect();
    'outer: loop {
        for l in lists.iter_mut() {
            match l.pop() {
                Some(s) => out.push(s),
                None => break 'outer,
            }
            if out.len() == n { break 'outer; }
        }
    }
    out
}

fn eval_dice(params: &ParamStore, config: &ModelConfig, heldout: &[Sample]) -> f64 {
    let catalog = GroupCatalog::build(params, config).unwrap();
    let mask = GroupMask::all_active(catalog.len());
    let mut total = 0.0;
    for s in heldout {
        let fp = forward(params, config, &mask, &s.image, &s.bbox).unwrap();
        let pred = Mask::from_logits(fp.logit_tensor());
        total += dice_iou(&pred, &s.mask).0;
    }
    total / heldout.len() as f64
}

fn main() {
    let size = 24;
    let config = ModelConfig {
        image_size: size, patch_size: 4, embed_dim: 32, num_blocks: 3,
        heads_per_block: 4, mlp_hidden: 64, decoder_hidden: 16,
        ..ModelConfig::default()
    };
    let base_spec = DistributionSpec::base();
    let adapted_specs = DistributionSpec::default_adapted();
    let train_base = generate(&base_spec, size, 2, 100, 256).unwrap();
    let held_base = generate(&base_spec, size, 2, 999, 32).unwrap();
    let train_adapt = mixture(&adapted_specs, size, 200, 256);
    let held_adapt = mixture(&adapted_specs, size, 888, 32);

    let params = build_model(&config, 7).unwrap();
    println!("params: {} (encoder {})", params.total_params(), params.encoder_params());

    let w = LossWeights::default();
    let t0 = Instant::now();
    let tcfg = TrainConfig { steps: 400, batch: 8, lr: 2e-3, ..TrainConfig::default() };
    let base_out = train(&params, &config, &train_base, &tcfg, &w, None).unwrap();
    println!("base 400 steps in {:.1}s, loss {:.4} -> {:.4}",
        t0.elapsed().as_secs_f64(), base_out.curve.points[0].1,
        base_out.curve.points.last().unwrap().1);
    println!("base dice on crisp heldout: {:.4}", eval_dice(&base_out.params, &config, &held_base));
    println!("base dice on adapted heldout: {:.4}", eval_dice(&base_out.params, &config, &held_adapt));

    let t1 = Instant::now();
    let acfg = TrainConfig { steps: 200, batch: 8, lr: 1e-3, loss: TrainLoss::Boundary, ..TrainConfig::default() };
    let adapted = adapt(&base_out.params, &config, &train_adapt, &acfg, &w, None).unwrap();
    println!("adapt 200 steps in {:.1}s", t1.elapsed().as_secs_f64());
    println!("adapted dice on adapted heldout: {:.4}", eval_dice(&adapted.params, &config, &held_adapt));
    println!("adapted dice on crisp heldout: {:.4}", eval_dice(&adapted.params, &config, &held_base));
}
