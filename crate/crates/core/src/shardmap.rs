//! Column-to-rank assignment between a healthy TP group of degree `n1` and
//! a reduced group of degree `n2`.
//!
//! The reduced replica shards its partition dimension contiguously over
//! `n2` ranks. The healthy replica computes with a balanced `n1`-way
//! layout, but during gradient synchronization its lowest `n2` ranks hold
//! exactly the same contiguous shards as the reduced replica, so every
//! shard pairs 1-to-1 across replicas. Each of those `n2` sync ranks keeps
//! a prefix of its sync shard for compute and offloads the rest
//! round-robin to the `n1 - n2` remaining ranks.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Sizes of a balanced partition of `k` into `n` parts, larger parts first.
pub fn balanced_sizes(k: usize, n: usize) -> Vec<usize> {
    let (base, rem) = (k / n, k % n);
    (0..n).map(|i| base + usize::from(i < rem)).collect()
}

/// Contiguous index ranges of a balanced `n`-way partition of `0..k`.
pub fn contiguous_ranges(k: usize, n: usize) -> Vec<Range<usize>> {
    let mut start = 0;
    balanced_sizes(k, n)
        .into_iter()
        .map(|len| {
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawShardMap")]
pub struct ShardMap {
    k: usize,
    n1: usize,
    n2: usize,
    comp_rank: Vec<usize>,
    sync_rank: Vec<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawShardMap {
    k: usize,
    n1: usize,
    n2: usize,
    comp_rank: Vec<usize>,
    sync_rank: Vec<usize>,
}

impl TryFrom<RawShardMap> for ShardMap {
    type Error = Error;

    fn try_from(raw: RawShardMap) -> Result<Self> {
        validate_degrees(raw.k, raw.n1, raw.n2)?;
        if raw.comp_rank.len() != raw.k || raw.sync_rank.len() != raw.k {
            return Err(Error::DimensionMismatch(format!(
                "rank arrays must have length k={}",
                raw.k
            )));
        }
        if raw.comp_rank.iter().any(|&r| r >= raw.n1) {
            return Err(Error::OutOfRange("comp_rank entry >= n1".into()));
        }
        if raw.sync_rank.iter().any(|&r| r >= raw.n2) {
            return Err(Error::OutOfRange("sync_rank entry >= n2".into()));
        }
        Ok(ShardMap {
            k: raw.k,
            n1: raw.n1,
            n2: raw.n2,
            comp_rank: raw.comp_rank,
            sync_rank: raw.sync_rank,
        })
    }
}

fn validate_degrees(k: usize, n1: usize, n2: usize) -> Result<()> {
    if k == 0 || n1 == 0 || n2 == 0 {
        return Err(invalid(format!(
            "k, n1, n2 must be positive (got k={k}, n1={n1}, n2={n2})"
        )));
    }
    if n2 > n1 {
        return Err(invalid(format!("n2={n2} exceeds n1={n1}")));
    }
    if n1 > k {
        return Err(invalid(format!("n1={n1} exceeds partition size k={k}")));
    }
    Ok(())
}

/// Builds the compute/sync assignment for `k` partition units.
pub fn build_shard_map(k: usize, n1: usize, n2: usize) -> Result<ShardMap> {
    validate_degrees(k, n1, n2)?;

    let sync_ranges = contiguous_ranges(k, n2);
    let comp_sizes = balanced_sizes(k, n1);
    let mut sync_rank = vec![0; k];
    let mut comp_rank = vec![0; k];

    let offload_ranks = n1 - n2;
    let mut next_offload = 0;
    for (i, range) in sync_ranges.into_iter().enumerate() {
        let keep = comp_sizes[i];
        for (pos, j) in range.enumerate() {
            sync_rank[j] = i;
            if pos < keep {
                comp_rank[j] = i;
            } else {
                comp_rank[j] = n2 + next_offload;
                next_offload = (next_offload + 1) % offload_ranks;
            }
        }
    }

    Ok(ShardMap { k, n1, n2, comp_rank, sync_rank })
}

impl ShardMap {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn n2(&self) -> usize {
        self.n2
    }

    pub fn comp_rank(&self) -> &[usize] {
        &self.comp_rank
    }

    pub fn sync_rank(&self) -> &[usize] {
        &self.sync_rank
    }

    /// Sorted column lists per compute rank (`n1` entries).
    pub fn comp_columns(&self) -> Vec<Vec<usize>> {
        group_by_rank(&self.comp_rank, self.n1)
    }

    /// Sorted column lists per sync rank (`n2` entries).
    pub fn sync_columns(&self) -> Vec<Vec<usize>> {
        group_by_rank(&self.sync_rank, self.n2)
    }

    /// Columns that stay on the same GPU for compute and sync.
    pub fn retained(&self) -> usize {
        self.comp_rank
            .iter()
            .zip(&self.sync_rank)
            .filter(|(c, s)| c == s)
            .count()
    }

    pub fn is_identity(&self) -> bool {
        self.comp_rank == self.sync_rank
    }
}

fn group_by_rank(ranks: &[usize], n: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); n];
    for (j, &r) in ranks.iter().enumerate() {
        out[r].push(j);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReshardDirection {
    /// Compute layout to sync layout, before the allreduce.
    PreSync,
    /// Sync layout back to compute layout, after the allreduce.
    PostSync,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transfer {
    pub src: usize,
    pub dst: usize,
    pub cols: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReshardPlan {
    pub direction: ReshardDirection,
    pub transfers: Vec<Transfer>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReshardStats {
    pub total_moved: usize,
    pub max_sent: usize,
    pub max_received: usize,
    pub sent_per_rank: Vec<usize>,
    pub received_per_rank: Vec<usize>,
    /// Link volume (columns) to number of ordered links carrying it.
    pub link_volume_histogram: BTreeMap<usize, usize>,
}

/// Column transfers realizing one direction of the reshard.
pub fn build_reshard_plan(map: &ShardMap, direction: ReshardDirection) -> ReshardPlan {
    let mut links: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for j in 0..map.k {
        let (c, s) = (map.comp_rank[j], map.sync_rank[j]);
        if c == s {
            continue;
        }
        let key = match direction {
            ReshardDirection::PreSync => (c, s),
            ReshardDirection::PostSync => (s, c),
        };
        links.entry(key).or_default().push(j);
    }
    let transfers = links
        .into_iter()
        .map(|((src, dst), cols)| Transfer { src, dst, cols })
        .collect();
    ReshardPlan { direction, transfers }
}

impl ReshardPlan {
    pub fn is_empty(&self) -> bool {
        self.transfers.is_empty()
    }

    /// Statistics over a group of `n_ranks` GPUs.
    pub fn stats(&self, n_ranks: usize) -> ReshardStats {
        let mut sent = vec![0; n_ranks];
        let mut received = vec![0; n_ranks];
        let mut hist = BTreeMap::new();
        let mut total = 0;
        for t in &self.transfers {
            let v = t.cols.len();
            sent[t.src] += v;
            received[t.dst] += v;
            total += v;
            *hist.entry(v).or_insert(0) += 1;
        }
        ReshardStats {
            total_moved: total,
            max_sent: sent.iter().copied().max().unwrap_or(0),
            max_received: received.iter().copied().max().unwrap_or(0),
            sent_per_rank: sent,
            received_per_rank: received,
            link_volume_histogram: hist,
        }
    }

    /// Applies the plan to a column-ownership vector.
    pub fn apply(&self, owner: &[usize]) -> Result<Vec<usize>> {
        let mut out = owner.to_vec();
        for t in &self.transfers {
            for &j in &t.cols {
                match out.get_mut(j) {
                    Some(o) if *o == t.src => *o = t.dst,
                    Some(o) => {
                        return Err(invalid(format!(
                            "column {j} is owned by rank {o}, not transfer source {}",
                            t.src
                        )))
                    }
                    None => return Err(Error::OutOfRange(format!("column {j}"))),
                }
            }
        }
        Ok(out)
    }
}

/// One (healthy shard, overlap) pair of a naive contiguous-vs-contiguous
/// pairing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Overlap {
    pub healthy_shard: usize,
    pub columns: usize,
}

/// For each of the `n2` reduced shards, the healthy shards it would need to
/// synchronize with if both replicas were sharded contiguously.
pub fn naive_contiguous_sync_volumes(k: usize, n1: usize, n2: usize) -> Result<Vec<Vec<Overlap>>> {
    validate_degrees(k, n1, n2)?;
    let healthy = contiguous_ranges(k, n1);
    Ok(contiguous_ranges(k, n2)
        .into_iter()
        .map(|r| {
            healthy
                .iter()
                .enumerate()
                .filter_map(|(h, hr)| {
                    let lo = r.start.max(hr.start);
                    let hi = r.end.min(hr.end);
                    (hi > lo).then(|| Overlap { healthy_shard: h, columns: hi - lo })
                })
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadPartition {
    pub heads_per_rank: Vec<usize>,
    /// Load of the busiest rank relative to a perfectly even split.
    pub imbalance: f64,
}

pub fn attention_head_partition(heads: usize, n: usize) -> Result<HeadPartition> {
    if heads == 0 || n == 0 {
        return Err(invalid("head count and TP degree must be positive"));
    }
    if n > heads {
        return Err(invalid(format!("TP degree {n} exceeds head count {heads}")));
    }
    let heads_per_rank = balanced_sizes(heads, n);
    let max = heads.div_ceil(n) as f64;
    Ok(HeadPartition { heads_per_rank, imbalance: max / (heads as f64 / n as f64) })
}
