//! Forward pass with group masking.
//!
//! Masking a head multiplies its attention context by zero before the
//! output projection; masking an MLP unit zeroes its hidden activation.
//! Both are exactly equivalent to physical removal of the group.

use super::{GroupMask, ModelConfig, ParamStore, PromptBox};
use crate::error::{MedError, Result};
use crate::tensor::{NodeId, Tape, Tensor};
use std::collections::BTreeMap;

/// Leaf ids of every parameter bound into a tape.
#[derive(Debug, Default)]
pub struct ParamBinding {
    ids: BTreeMap<String, NodeId>,
}

impl ParamBinding {
    pub fn bind(tape: &mut Tape, params: &ParamStore) -> Self {
        let mut ids = BTreeMap::new();
        for (name, t) in params.iter() {
            ids.insert(name.clone(), tape.leaf(t.clone()));
        }
        ParamBinding { ids }
    }

    pub fn id(&self, name: &str) -> NodeId {
        *self.ids.get(name).unwrap_or_else(|| panic!("unbound tensor {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }
}

/// A recorded forward pass: the tape plus the nodes downstream code needs.
pub struct ForwardPass {
    pub tape: Tape,
    /// (H, W) logit map.
    pub logits: NodeId,
    /// (num_tokens, d) encoder output after the final layernorm.
    pub encoder_features: NodeId,
    pub binding: ParamBinding,
}

impl ForwardPass {
    pub fn logit_tensor(&self) -> &Tensor {
        self.tape.value(self.logits)
    }
}

/// Run the model. `mask` has one entry per group in catalog enumeration
/// order (heads block-major, then MLP units block-major) and must match
/// the store's surviving group count.
pub fn forward(
    params: &ParamStore,
    config: &ModelConfig,
    mask: &GroupMask,
    image: &Tensor,
    bbox: &PromptBox,
) -> Result<ForwardPass> {
    let s = config.image_size;
    if image.dims() != [3, s, s] {
        return Err(MedError::ShapeMismatch {
            op: "forward(image)",
            lhs: image.dims().to_vec(),
            rhs: vec![3, s, s],
        });
    }
    bbox.validate(s, s)?;

    let dh = config.head_dim();
    let mut heads_per_block = Vec::with_capacity(config.num_blocks);
    let mut mlp_per_block = Vec::with_capacity(config.num_blocks);
    for b in 0..config.num_blocks {
        heads_per_block.push(params.get(&super::blk(b, "attn.wq"))?.dims()[1] / dh);
        mlp_per_block.push(params.get(&super::blk(b, "mlp.w1"))?.dims()[1]);
    }
    let total_heads: usize = heads_per_block.iter().sum();
    let total_groups = total_heads + mlp_per_block.iter().sum::<usize>();
    if mask.len() != total_groups {
        return Err(MedError::Config(format!(
            "group mask length {} != group count {}",
            mask.len(),
            total_groups
        )));
    }

    let mut tape = Tape::new();
    let binding = ParamBinding::bind(&mut tape, params);
    let t = &mut tape;

    // patch + prompt tokens
    let img = t.constant(image.clone());
    let patches = t.patch_fold(img, config.patch_size)?;
    let patch_tok = affine(t, &binding, patches, "enc.patch.w", "enc.patch.b")?;
    let boxt = t.constant(bbox.normalized(s, s));
    let wp = binding.id("prompt.embed.w");
    let prompt_tok = t.matmul(boxt, wp)?;
    let mut x = t.concat(&[prompt_tok, patch_tok], 0)?;
    let pos = binding.id("enc.pos");
    x = t.add(x, pos)?;

    let n_tok = config.num_tokens();
    let eps = config.layernorm_eps;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut head_base = 0usize;
    let mut mlp_base = total_heads;
    for b in 0..config.num_blocks {
        let heads = heads_per_block[b];
        let units = mlp_per_block[b];

        // attention sublayer
        let ln1 = layernorm_affine(t, &binding, x, b, "ln1", eps, n_tok)?;
        let q = affine(t, &binding, ln1, &super::blk(b, "attn.wq"), &super::blk(b, "attn.bq"))?;
        let k = affine(t, &binding, ln1, &super::blk(b, "attn.wk"), &super::blk(b, "attn.bk"))?;
        let v = affine(t, &binding, ln1, &super::blk(b, "attn.wv"), &super::blk(b, "attn.bv"))?;
        let mut contexts = Vec::with_capacity(heads);
        for h in 0..heads {
            let (cs, ce) = (h * dh, (h + 1) * dh);
            let qh = t.slice(q, 1, cs, ce)?;
            let kh = t.slice(k, 1, cs, ce)?;
            let vh = t.slice(v, 1, cs, ce)?;
            let kt = t.transpose(kh)?;
            let scores = t.matmul(qh, kt)?;
            let scaled = t.scale(scores, scale);
            let attn = t.softmax(scaled)?;
            let mut ctx = t.matmul(attn, vh)?;
            if !mask.is_active(head_base + h) {
                ctx = t.scale(ctx, 0.0);
            }
            contexts.push(ctx);
        }
        let ctx_all = if contexts.len() == 1 {
            contexts[0]
        } else {
            t.concat(&contexts, 1)?
        };
        let attn_out = affine(t, &binding, ctx_all, &super::blk(b, "attn.wo"), &super::blk(b, "attn.bo"))?;
        x = t.add(x, attn_out)?;

        // mlp sublayer
        let ln2 = layernorm_affine(t, &binding, x, b, "ln2", eps, n_tok)?;
        let h1 = affine(t, &binding, ln2, &super::blk(b, "mlp.w1"), &super::blk(b, "mlp.b1"))?;
        let mut act = t.gelu(h1);
        let any_masked = (0..units).any(|u| !mask.is_active(mlp_base + u));
        if any_masked {
            let mv: Vec<f64> = (0..units)
                .map(|u| if mask.is_active(mlp_base + u) { 1.0 } else { 0.0 })
                .collect();
            let mc = t.constant(Tensor::from_parts(vec![units], mv));
            let mb = t.broadcast(mc, &[n_tok, units])?;
            act = t.mul(act, mb)?;
        }
        let h2 = affine(t, &binding, act, &super::blk(b, "mlp.w2"), &super::blk(b, "mlp.b2"))?;
        x = t.add(x, h2)?;

        head_base += heads;
        mlp_base += units;
    }

    // final layernorm with affine
    let lnf = t.layernorm(x, eps)?;
    let g = binding.id("enc.lnf.g");
    let bb = binding.id("enc.lnf.b");
    let gb = t.broadcast(g, &[n_tok, config.embed_dim])?;
    let bbx = t.broadcast(bb, &[n_tok, config.embed_dim])?;
    let scaled = t.mul(lnf, gb)?;
    let features = t.add(scaled, bbx)?;

    // decoder: drop prompt token, fold to a grid, two upsample+projection stages
    let grid = config.grid();
    let d = config.embed_dim;
    let dh2 = config.decoder_hidden;
    let tokens = t.slice(features, 0, 1, n_tok)?;
    let tt = t.transpose(tokens)?; // (d, G)
    let fmap = t.reshape(tt, &[d, grid, grid])?;
    let up1 = t.upsample_nearest(fmap, 2)?; // (d, 2g, 2g)
    let g2 = 2 * grid;
    let flat1 = t.reshape(up1, &[d, g2 * g2])?;
    let cols1 = t.transpose(flat1)?; // (4G, d)
    let proj1 = affine(t, &binding, cols1, "dec.s1.w", "dec.s1.b")?;
    let act1 = t.gelu(proj1);
    let back1 = t.transpose(act1)?; // (dh2, 4G)
    let fmap2 = t.reshape(back1, &[dh2, g2, g2])?;
    let up2 = t.upsample_bilinear(fmap2, config.patch_size / 2)?; // (dh2, S, S)
    let flat2 = t.reshape(up2, &[dh2, s * s])?;
    let cols2 = t.transpose(flat2)?; // (S², dh2)
    let proj2 = affine(t, &binding, cols2, "dec.s2.w", "dec.s2.b")?;
    let logits = t.reshape(proj2, &[s, s])?;

    tape.check_finite(logits, "forward logits")?;
    Ok(ForwardPass {
        tape,
        logits,
        encoder_features: features,
        binding,
    })
}

fn affine(
    t: &mut Tape,
    binding: &ParamBinding,
    x: NodeId,
    w_name: &str,
    b_name: &str,
) -> Result<NodeId> {
    let w = binding.id(w_name);
    let b = binding.id(b_name);
    let y = t.matmul(x, w)?;
    let dims = t.dims(y).to_vec();
    let bb = t.broadcast(b, &dims)?;
    t.add(y, bb)
}

fn layernorm_affine(
    t: &mut Tape,
    binding: &ParamBinding,
    x: NodeId,
    block: usize,
    which: &str,
    eps: f64,
    n_tok: usize,
) -> Result<NodeId> {
    let normed = t.layernorm(x, eps)?;
    let g = binding.id(&super::blk(block, &format!("{which}.g")));
    let b = binding.id(&super::blk(block, &format!("{which}.b")));
    let d = t.dims(normed)[1];
    let gb = t.broadcast(g, &[n_tok, d])?;
    let bb = t.broadcast(b, &[n_tok, d])?;
    let scaled = t.mul(normed, gb)?;
    t.add(scaled, bb)
}
