//! The structured-group partition: attention heads and MLP hidden units
//! of the encoder, with their member parameter slices and costs.

use super::{ModelConfig, ParamStore};
use crate::error::{MedError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKind {
    Head,
    Mlp,
}

/// A contiguous region of one tensor owned by a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    /// Row range of a rank-2 tensor.
    Rows { start: usize, end: usize },
    /// Column range of a rank-2 tensor.
    Cols { start: usize, end: usize },
    /// Flat element range (rank-1 tensors).
    Flat { start: usize, end: usize },
}

#[derive(Debug, Clone)]
pub struct Member {
    pub tensor: String,
    pub region: Region,
}

impl Member {
    /// Visit the flat element indices of this member within its tensor.
    pub fn for_each_index(&self, dims: &[usize], mut f: impl FnMut(usize)) {
        match self.region {
            Region::Flat { start, end } => {
                for i in start..end {
                    f(i);
                }
            }
            Region::Rows { start, end } => {
                let cols = dims[1];
                for i in start * cols..end * cols {
                    f(i);
                }
            }
            Region::Cols { start, end } => {
                let (rows, cols) = (dims[0], dims[1]);
                for r in 0..rows {
                    for c in start..end {
                        f(r * cols + c);
                    }
                }
            }
        }
    }

    pub fn count(&self, dims: &[usize]) -> usize {
        match self.region {
            Region::Flat { start, end } => end - start,
            Region::Rows { start, end } => (end - start) * dims[1],
            Region::Cols { start, end } => (end - start) * dims[0],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Group {
    pub id: usize,
    pub kind: GroupKind,
    /// Encoder block index b(g).
    pub block: usize,
    /// Head index or MLP unit index within the block.
    pub index: usize,
    /// Member parameter count c_g.
    pub cost: usize,
    pub members: Vec<Member>,
}

/// Binary mask over groups; true = active.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupMask(Vec<bool>);

impl GroupMask {
    pub fn all_active(k: usize) -> Self {
        GroupMask(vec![true; k])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_active(&self, id: usize) -> bool {
        self.0[id]
    }

    pub fn deactivate(&mut self, id: usize) {
        self.0[id] = false;
    }

    pub fn activate(&mut self, id: usize) {
        self.0[id] = true;
    }

    pub fn inactive_ids(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &a)| !a)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn num_inactive(&self) -> usize {
        self.0.iter().filter(|&&a| !a).count()
    }
}

/// The group partition 𝒢 for a (possibly already pruned) parameter store.
///
/// Enumeration order is fixed: all heads block-major, then all MLP units
/// block-major. Group ids are positions in this order.
#[derive(Debug, Clone)]
pub struct GroupCatalog {
    groups: Vec<Group>,
    head_dim: usize,
    /// Surviving heads per block.
    heads_per_block: Vec<usize>,
    /// Surviving MLP units per block.
    mlp_per_block: Vec<usize>,
}

impl GroupCatalog {
    /// Assemble a catalog from explicit groups. Mostly useful for tests
    /// and tools that need custom partitions.
    pub fn from_groups(
        groups: Vec<Group>,
        head_dim: usize,
        heads_per_block: Vec<usize>,
        mlp_per_block: Vec<usize>,
    ) -> Self {
        GroupCatalog {
            groups,
            head_dim,
            heads_per_block,
            mlp_per_block,
        }
    }

    pub fn build(params: &ParamStore, config: &ModelConfig) -> Result<Self> {
        let dh = config.head_dim();
        let d = config.embed_dim;
        let mut heads_per_block = Vec::with_capacity(config.num_blocks);
        let mut mlp_per_block = Vec::with_capacity(config.num_blocks);
        for b in 0..config.num_blocks {
            let dq = params.get(&super::blk(b, "attn.wq"))?.dims()[1];
            if dq % dh != 0 {
                return Err(MedError::Config(format!(
                    "block {b}: qkv width {dq} not divisible by head dim {dh}"
                )));
            }
            heads_per_block.push(dq / dh);
            mlp_per_block.push(params.get(&super::blk(b, "mlp.w1"))?.dims()[1]);
        }

        let mut groups = Vec::new();
        for (b, &heads) in heads_per_block.iter().enumerate() {
            for h in 0..heads {
                let (s, e) = (h * dh, (h + 1) * dh);
                let members = vec![
                    Member { tensor: super::blk(b, "attn.wq"), region: Region::Cols { start: s, end: e } },
                    Member { tensor: super::blk(b, "attn.bq"), region: Region::Flat { start: s, end: e } },
                    Member { tensor: super::blk(b, "attn.wk"), region: Region::Cols { start: s, end: e } },
                    Member { tensor: super::blk(b, "attn.bk"), region: Region::Flat { start: s, end: e } },
                    Member { tensor: super::blk(b, "attn.wv"), region: Region::Cols { start: s, end: e } },
                    Member { tensor: super::blk(b, "attn.bv"), region: Region::Flat { start: s, end: e } },
                    Member { tensor: super::blk(b, "attn.wo"), region: Region::Rows { start: s, end: e } },
                ];
                groups.push(Group {
                    id: groups.len(),
                    kind: GroupKind::Head,
                    block: b,
                    index: h,
                    cost: 3 * (d * dh + dh) + dh * d,
                    members,
                });
            }
        }
        for (b, &units) in mlp_per_block.iter().enumerate() {
            for u in 0..units {
                let members = vec![
                    Member { tensor: super::blk(b, "mlp.w1"), region: Region::Cols { start: u, end: u + 1 } },
                    Member { tensor: super::blk(b, "mlp.b1"), region: Region::Flat { start: u, end: u + 1 } },
                    Member { tensor: super::blk(b, "mlp.w2"), region: Region::Rows { start: u, end: u + 1 } },
                ];
                groups.push(Group {
                    id: groups.len(),
                    kind: GroupKind::Mlp,
                    block: b,
                    index: u,
                    cost: 2 * d + 1,
                    members,
                });
            }
        }
        Ok(GroupCatalog {
            groups,
            head_dim: dh,
            heads_per_block,
            mlp_per_block,
        })
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn group(&self, id: usize) -> Result<&Group> {
        self.groups.get(id).ok_or(MedError::UnknownGroup(id))
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn heads_per_block(&self) -> &[usize] {
        &self.heads_per_block
    }

    pub fn mlp_per_block(&self) -> &[usize] {
        &self.mlp_per_block
    }

    pub fn num_blocks(&self) -> usize {
        self.heads_per_block.len()
    }

    /// Sum of c_g over all groups (the pruneable parameter count).
    pub fn total_cost(&self) -> usize {
        self.groups.iter().map(|g| g.cost).sum()
    }

    /// Sum of a group's member L2 norm squared over a parameter store.
    pub fn group_sq_norm(&self, params: &ParamStore, id: usize) -> Result<f64> {
        let group = self.group(id)?;
        let mut acc = 0.0;
        for m in &group.members {
            let t = params.get(&m.tensor)?;
            let data = t.data();
            m.for_each_index(t.dims(), |i| acc += data[i] * data[i]);
        }
        Ok(acc)
    }
}
