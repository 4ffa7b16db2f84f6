//! The desk-scale prompt-conditioned ViT segmentation model.
//!
//! A patch-embedded ViT encoder with one extra box-prompt token, a small
//! two-stage upsampling decoder to per-pixel logits, an explicit
//! structured-group catalog (attention heads, MLP hidden units), group
//! masking, and physical removal that is exactly equivalent to masking.

mod catalog;
mod checkpoint;
mod forward;
mod intervention;

#[cfg(test)]
mod tests;

pub use catalog::{Group, GroupCatalog, GroupKind, GroupMask, Member, Region};
pub use checkpoint::{read_tensor_entries, write_tensor_entries};
pub use forward::{forward, ForwardPass, ParamBinding};
pub use intervention::{apply_group_intervention, physically_remove, InterventionKind};

use crate::error::{MedError, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Bounding-box prompt in pixel coordinates, half-open on the upper edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PromptBox {
    pub fn validate(&self, w: usize, h: usize) -> Result<()> {
        if self.x0 < self.x1 && self.x1 <= w && self.y0 < self.y1 && self.y1 <= h {
            Ok(())
        } else {
            Err(MedError::Config(format!(
                "invalid prompt box ({},{})..({},{}) for {w}x{h} image",
                self.x0, self.y0, self.x1, self.y1
            )))
        }
    }

    /// Box coordinates normalized to [0,1]^4 as a (1,4) tensor.
    pub fn normalized(&self, w: usize, h: usize) -> Tensor {
        Tensor::from_parts(
            vec![1, 4],
            vec![
                self.x0 as f64 / w as f64,
                self.y0 as f64 / h as f64,
                self.x1 as f64 / w as f64,
                self.y1 as f64 / h as f64,
            ],
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub heads_per_block: usize,
    pub mlp_hidden: usize,
    pub decoder_hidden: usize,
    pub layernorm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            embed_dim: 64,
            num_blocks: 4,
            heads_per_block: 4,
            mlp_hidden: 128,
            decoder_hidden: 32,
            layernorm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.embed_dim > 0
            && self.heads_per_block > 0
            && self.embed_dim % self.heads_per_block == 0
            && self.patch_size > 0
            && self.patch_size % 2 == 0
            && self.image_size % self.patch_size == 0
            && self.num_blocks > 0
            && self.mlp_hidden > 0
            && self.decoder_hidden > 0;
        if !ok {
            return Err(MedError::Config(format!(
                "invalid model config: {self:?} (need d % H == 0, even patch, image % patch == 0)"
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads_per_block
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch tokens plus one prompt token.
    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }
}

/// Which part of the model a tensor belongs to. Derived from its name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Encoder,
    Decoder,
    Prompt,
}

pub fn role_of(name: &str) -> Role {
    if name.starts_with("dec.") {
        Role::Decoder
    } else if name.starts_with("prompt.") {
        Role::Prompt
    } else {
        Role::Encoder
    }
}

/// Prompt tensors are frozen in every experiment.
pub fn is_frozen(name: &str) -> bool {
    role_of(name) == Role::Prompt
}

/// Named-tensor parameter checkpoint, ordered by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| MedError::Alignment(format!("missing tensor {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| MedError::Alignment(format!("missing tensor {name}")))
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn total_params(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Scalar count over encoder tensors only.
    pub fn encoder_params(&self) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| role_of(n) == Role::Encoder)
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Parameter-by-parameter alignment: identical names and dims.
    pub fn check_aligned(&self, other: &ParamStore) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(MedError::Alignment(format!(
                "tensor count {} vs {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for ((an, at), (bn, bt)) in self.tensors.iter().zip(other.tensors.iter()) {
            if an != bn {
                return Err(MedError::Alignment(format!("name {an} vs {bn}")));
            }
            if at.dims() != bt.dims() {
                return Err(MedError::Alignment(format!(
                    "tensor {an}: dims {:?} vs {:?}",
                    at.dims(),
                    bt.dims()
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        checkpoint::load(path)
    }
}

fn blk(b: usize, suffix: &str) -> String {
    format!("enc.block{b:02}.{suffix}")
}

/// Deterministic model initialization. Every tensor draws from its own
/// substream keyed by position in name order, so adding a tensor does not
/// shift the others.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let d = self::build_shapes(config);
    let mut store = ParamStore::new();
    for (i, (name, dims, init)) in d.into_iter().enumerate() {
        let mut rng = SplitMix64::substream(seed, i as u64);
        let n: usize = dims.iter().product();
        let data: Vec<f64> = match init {
            Init::Normal(scale) => (0..n).map(|_| scale * rng.next_normal()).collect(),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        store.insert(name, Tensor::from_parts(dims, data));
    }
    Ok(store)
}

enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

fn build_shapes(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = c.embed_dim;
    let p = c.patch_size;
    let n_tok = c.num_tokens();
    let w_init = Init::Normal(0.02);
    let mut out: Vec<(String, Vec<usize>, Init)> = vec![
        ("enc.patch.w".into(), vec![3 * p * p, d], Init::Normal(0.02)),
        ("enc.patch.b".into(), vec![d], Init::Zeros),
        ("enc.pos".into(), vec![n_tok, d], Init::Normal(0.02)),
        ("enc.lnf.g".into(), vec![d], Init::Ones),
        ("enc.lnf.b".into(), vec![d], Init::Zeros),
        ("prompt.embed.w".into(), vec![4, d], Init::Normal(0.5)),
        ("dec.s1.w".into(), vec![d, c.decoder_hidden], Init::Normal(0.05)),
        ("dec.s1.b".into(), vec![c.decoder_hidden], Init::Zeros),
        ("dec.s2.w".into(), vec![c.decoder_hidden, 1], Init::Normal(0.05)),
        ("dec.s2.b".into(), vec![1], Init::Zeros),
    ];
    let _ = w_init;
    for b in 0..c.num_blocks {
        out.push((blk(b, "ln1.g"), vec![d], Init::Ones));
        out.push((blk(b, "ln1.b"), vec![d], Init::Zeros));
        for w in ["attn.wq", "attn.wk", "attn.wv"] {
            out.push((blk(b, w), vec![d, d], Init::Normal(0.02)));
        }
        for bias in ["attn.bq", "attn.bk", "attn.bv"] {
            out.push((blk(b, bias), vec![d], Init::Zeros));
        }
        out.push((blk(b, "attn.wo"), vec![d, d], Init::Normal(0.02)));
        out.push((blk(b, "attn.bo"), vec![d], Init::Zeros));
        out.push((blk(b, "ln2.g"), vec![d], Init::Ones));
        out.push((blk(b, "ln2.b"), vec![d], Init::Zeros));
        out.push((blk(b, "mlp.w1"), vec![d, c.mlp_hidden], Init::Normal(0.02)));
        out.push((blk(b, "mlp.b1"), vec![c.mlp_hidden], Init::Zeros));
        out.push((blk(b, "mlp.w2"), vec![c.mlp_hidden, d], Init::Normal(0.02)));
        out.push((blk(b, "mlp.b2"), vec![d], Init::Zeros));
    }
    out
}

/// Analytic FLOPs of one forward pass (matmul 2mnk convention), computed
/// from the surviving tensor dims.
pub fn flops_estimate(params: &ParamStore, config: &ModelConfig) -> Result<u64> {
    let n = config.num_tokens() as u64;
    let d = config.embed_dim as u64;
    let g = (config.grid() * config.grid()) as u64;
    let p = config.patch_size as u64;
    let dh = config.head_dim() as u64;
    let mut fl = 2 * g * (3 * p * p) * d; // patch embedding
    fl += 2 * 4 * d; // prompt embedding
    for b in 0..config.num_blocks {
        let dq = params.get(&blk(b, "attn.wq"))?.dims()[1] as u64;
        let heads = dq / dh;
        let m = params.get(&blk(b, "mlp.w1"))?.dims()[1] as u64;
        fl += 3 * 2 * n * d * dq; // q, k, v projections
        fl += heads * (2 * n * n * dh) * 2; // scores and context per head
        fl += 2 * n * dq * d; // output projection
        fl += 2 * n * d * m + 2 * n * m * d; // mlp
    }
    let s2 = (config.image_size * config.image_size) as u64;
    let dh2 = config.decoder_hidden as u64;
    fl += 2 * (4 * g) * d * dh2; // decoder stage 1 projection
    fl += 2 * s2 * dh2; // decoder stage 2 projection
    Ok(fl)
}
