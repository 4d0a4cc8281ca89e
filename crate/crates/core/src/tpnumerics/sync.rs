//! Gradient synchronization between data-parallel replicas, including the
//! nonuniform case where one replica runs at a reduced TP degree.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::shardmap::{build_reshard_plan, ReshardDirection, ReshardPlan, ShardMap};
use crate::tpnumerics::matrix::DenseMatrix;
use crate::tpnumerics::mlp::{ColumnFragment, ShardedPair, TpReplica};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReduceOp {
    #[default]
    Sum,
    Average,
}

type ColumnData<T> = (Vec<T>, Vec<T>);

/// Moves gradient columns between ranks according to `plan`. The output has
/// the same number of ranks as the input; ranks may end up empty.
pub fn execute_reshard<T: Scalar>(pair: &ShardedPair<T>, plan: &ReshardPlan) -> Result<ShardedPair<T>> {
    let hidden = pair.hidden();
    let mut ranks: Vec<BTreeMap<usize, ColumnData<T>>> = pair
        .fragments()
        .iter()
        .map(|f| {
            f.cols
                .iter()
                .enumerate()
                .map(|(local, &j)| (j, (f.a.column(local), f.b.row(local).to_vec())))
                .collect()
        })
        .collect();

    for t in &plan.transfers {
        if t.src >= ranks.len() || t.dst >= ranks.len() {
            return Err(Error::OutOfRange(format!("transfer {} -> {} on {} ranks", t.src, t.dst, ranks.len())));
        }
        for &j in &t.cols {
            let data = ranks[t.src]
                .remove(&j)
                .ok_or_else(|| invalid(format!("rank {} does not hold column {j}", t.src)))?;
            ranks[t.dst].insert(j, data);
        }
    }

    let fragments = ranks
        .into_iter()
        .map(|cols| {
            let ids: Vec<usize> = cols.keys().copied().collect();
            let n = ids.len();
            let mut a = DenseMatrix::zeros(hidden, n);
            let mut b_data = Vec::with_capacity(n * hidden);
            for (local, (a_col, b_row)) in cols.into_values().enumerate() {
                for (r, v) in a_col.into_iter().enumerate() {
                    a.set(r, local, v);
                }
                b_data.extend(b_row);
            }
            let b = DenseMatrix::from_vec(n, hidden, b_data)?;
            Ok(ColumnFragment { cols: ids, a, b })
        })
        .collect::<Result<Vec<_>>>()?;
    ShardedPair::from_fragments(pair.k(), hidden, fragments)
}

fn reduce_fragments<T: Scalar>(parts: &[&ColumnFragment<T>], op: ReduceOp) -> Result<ColumnFragment<T>> {
    let first = parts[0];
    let mut a = first.a.clone();
    let mut b = first.b.clone();
    for p in &parts[1..] {
        if p.cols != first.cols {
            return Err(Error::DimensionMismatch(format!(
                "paired shards hold different columns ({} vs {} columns)",
                first.cols.len(),
                p.cols.len()
            )));
        }
        a = a.add(&p.a)?;
        b = b.add(&p.b)?;
    }
    if op == ReduceOp::Average {
        let n = T::from_usize(parts.len()).ok_or_else(|| invalid("replica count not representable"))?;
        let inv = T::one() / n;
        a = a.scale(inv);
        b = b.scale(inv);
    }
    Ok(ColumnFragment { cols: first.cols.clone(), a, b })
}

/// Shard-by-shard allreduce across replicas that share one layout.
pub fn uniform_grad_sync<T: Scalar>(replicas: &[ShardedPair<T>], op: ReduceOp) -> Result<ShardedPair<T>> {
    let first = replicas.first().ok_or_else(|| invalid("no replicas to synchronize"))?;
    if replicas.iter().any(|r| r.degree() != first.degree() || r.k() != first.k() || r.hidden() != first.hidden()) {
        return Err(Error::DimensionMismatch("replicas use different shardings".into()));
    }
    let fragments = (0..first.degree())
        .map(|i| {
            let parts: Vec<&ColumnFragment<T>> = replicas.iter().map(|r| &r.fragments()[i]).collect();
            reduce_fragments(&parts, op)
        })
        .collect::<Result<Vec<_>>>()?;
    ShardedPair::from_fragments(first.k(), first.hidden(), fragments)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonuniformSyncOutput<T> {
    /// Synchronized gradients on the healthy replica, in its compute layout.
    pub healthy: ShardedPair<T>,
    /// Synchronized gradients on the reduced replica.
    pub reduced: ShardedPair<T>,
    pub pre_sync: ReshardPlan,
    pub post_sync: ReshardPlan,
}

/// Synchronizes gradients between a healthy replica (degree `n1`, compute
/// layout of `map`) and a reduced replica (degree `n2`, contiguous layout).
///
/// The healthy side first reshards into the contiguous `n2` layout, each
/// sync rank then reduces with its 1-to-1 partner on the reduced side, and
/// the healthy side finally reshards back to its compute layout.
pub fn nonuniform_grad_sync<T: Scalar>(
    healthy: &TpReplica<T>,
    reduced: &TpReplica<T>,
    map: &ShardMap,
    op: ReduceOp,
) -> Result<NonuniformSyncOutput<T>> {
    let hg = healthy.grads.as_ref().ok_or_else(|| invalid("healthy replica has no gradients"))?;
    let rg = reduced.grads.as_ref().ok_or_else(|| invalid("reduced replica has no gradients"))?;
    if hg.k() != map.k() || rg.k() != map.k() || hg.hidden() != rg.hidden() {
        return Err(Error::DimensionMismatch(format!(
            "shard map covers {} columns, gradients cover {} / {}",
            map.k(),
            hg.k(),
            rg.k()
        )));
    }
    if hg.degree() != map.n1() || hg.layout() != map.comp_columns() {
        return Err(Error::DimensionMismatch("healthy gradients are not in the map's compute layout".into()));
    }
    if rg.degree() != map.n2() || rg.layout() != map.sync_columns() {
        return Err(Error::DimensionMismatch("reduced gradients are not in the map's sync layout".into()));
    }

    let pre_sync = build_reshard_plan(map, ReshardDirection::PreSync);
    let post_sync = build_reshard_plan(map, ReshardDirection::PostSync);

    let staged = execute_reshard(hg, &pre_sync)?;
    let mut synced = Vec::with_capacity(map.n1());
    for i in 0..map.n2() {
        synced.push(reduce_fragments(&[&staged.fragments()[i], &rg.fragments()[i]], op)?);
    }
    let reduced_out = ShardedPair::from_fragments(map.k(), hg.hidden(), synced.clone())?;
    for f in &staged.fragments()[map.n2()..] {
        if !f.cols.is_empty() {
            return Err(invalid("offload rank still holds columns after pre-sync reshard"));
        }
        synced.push(f.clone());
    }
    let staged_synced = ShardedPair::from_fragments(map.k(), hg.hidden(), synced)?;
    let healthy_out = execute_reshard(&staged_synced, &post_sync)?;

    Ok(NonuniformSyncOutput { healthy: healthy_out, reduced: reduced_out, pre_sync, post_sync })
}
