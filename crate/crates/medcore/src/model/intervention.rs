//! Group interventions (zero / reset) and physical removal.

use super::{GroupCatalog, GroupKind, ModelConfig, ParamStore, Region};
use crate::error::{MedError, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterventionKind {
    /// Set the group's parameters to zero.
    Zero,
    /// Restore the group's parameters from a reference (base) store.
    Reset,
}

/// Apply a zero or reset intervention to group `g`, leaving every other
/// parameter bit-identical. For `Reset`, `reference` must align with
/// `params` name-for-name and dim-for-dim.
pub fn apply_group_intervention(
    params: &ParamStore,
    catalog: &GroupCatalog,
    g: usize,
    kind: InterventionKind,
    reference: Option<&ParamStore>,
) -> Result<ParamStore> {
    let group = catalog.group(g)?;
    let mut out = params.clone();
    for member in &group.members {
        let dims = params.get(&member.tensor)?.dims().to_vec();
        match kind {
            InterventionKind::Zero => {
                let t = out.get_mut(&member.tensor)?;
                let data = t.data_mut();
                member.for_each_index(&dims, |i| data[i] = 0.0);
            }
            InterventionKind::Reset => {
                let reference = reference.ok_or_else(|| {
                    MedError::Config("reset intervention needs a reference store".into())
                })?;
                params.check_aligned(reference)?;
                let src = reference.get(&member.tensor)?.data().to_vec();
                let t = out.get_mut(&member.tensor)?;
                let data = t.data_mut();
                member.for_each_index(&dims, |i| data[i] = src[i]);
            }
        }
    }
    Ok(out)
}

/// Physically delete pruned groups: heads lose their q/k/v column slices,
/// bias entries and output-projection rows; MLP units lose their first-layer
/// column, bias entry and second-layer row. The encoder width d is
/// unchanged, so the pruned model is drop-in for the decoder.
///
/// Errors if any block would lose all of its heads or all of its MLP units.
pub fn physically_remove(
    params: &ParamStore,
    catalog: &GroupCatalog,
    config: &ModelConfig,
    pruned: &[usize],
) -> Result<(ParamStore, GroupCatalog)> {
    // validate ids and min-retention (at least one survivor per block/kind)
    let mut head_losses = vec![0usize; catalog.num_blocks()];
    let mut mlp_losses = vec![0usize; catalog.num_blocks()];
    for &id in pruned {
        let g = catalog.group(id)?;
        match g.kind {
            GroupKind::Head => head_losses[g.block] += 1,
            GroupKind::Mlp => mlp_losses[g.block] += 1,
        }
    }
    for b in 0..catalog.num_blocks() {
        if head_losses[b] >= catalog.heads_per_block()[b] && catalog.heads_per_block()[b] > 0 {
            return Err(MedError::InfeasiblePlan(format!(
                "removal would delete every head of block {b}"
            )));
        }
        if mlp_losses[b] >= catalog.mlp_per_block()[b] && catalog.mlp_per_block()[b] > 0 {
            return Err(MedError::InfeasiblePlan(format!(
                "removal would delete every MLP unit of block {b}"
            )));
        }
    }

    // collect dropped rows/cols/flat indices per tensor
    #[derive(Default)]
    struct Drops {
        rows: Vec<usize>,
        cols: Vec<usize>,
        flat: Vec<usize>,
    }
    let mut drops: BTreeMap<String, Drops> = BTreeMap::new();
    for &id in pruned {
        let g = catalog.group(id)?;
        for m in &g.members {
            let d = drops.entry(m.tensor.clone()).or_default();
            match m.region {
                Region::Rows { start, end } => d.rows.extend(start..end),
                Region::Cols { start, end } => d.cols.extend(start..end),
                Region::Flat { start, end } => d.flat.extend(start..end),
            }
        }
    }

    let mut out = ParamStore::new();
    for (name, tensor) in params.iter() {
        let rebuilt = match drops.get(name) {
            None => tensor.clone(),
            Some(d) => drop_from_tensor(tensor, d.rows.as_slice(), d.cols.as_slice(), &d.flat),
        };
        out.insert(name.clone(), rebuilt);
    }

    let new_catalog = GroupCatalog::build(&out, config)?;
    Ok((out, new_catalog))
}

fn drop_from_tensor(t: &Tensor, rows: &[usize], cols: &[usize], flat: &[usize]) -> Tensor {
    match t.rank() {
        1 => {
            let keep: Vec<bool> = {
                let mut k = vec![true; t.len()];
                for &i in flat {
                    k[i] = false;
                }
                k
            };
            let data: Vec<f64> = t
                .data()
                .iter()
                .zip(&keep)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .collect();
            let n = data.len();
            Tensor::from_parts(vec![n], data)
        }
        2 => {
            let (r, c) = (t.dims()[0], t.dims()[1]);
            let mut keep_r = vec![true; r];
            for &i in rows {
                keep_r[i] = false;
            }
            let mut keep_c = vec![true; c];
            for &i in cols {
                keep_c[i] = false;
            }
            let nr = keep_r.iter().filter(|&&k| k).count();
            let nc = keep_c.iter().filter(|&&k| k).count();
            let mut data = Vec::with_capacity(nr * nc);
            for i in 0..r {
                if !keep_r[i] {
                    continue;
                }
                for j in 0..c {
                    if keep_c[j] {
                        data.push(t.at2(i, j));
                    }
                }
            }
            Tensor::from_parts(vec![nr, nc], data)
        }
        _ => unreachable!("group members only live in rank-1/2 tensors"),
    }
}
