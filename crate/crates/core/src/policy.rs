//! Recovery policies: map the healthy-GPU count of every scale-up domain to
//! a training configuration under DP-DROP, NTP, or NTP with power boosting.
//!
//! Placement works on TP slots: contiguous blocks of `tp` GPUs inside a
//! domain. When `tp` equals the domain size a slot is a whole domain.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::failure::{Cluster, ClusterState, FailureTrace, Replay};
use crate::perfmodel::{IterTimeModel, OperatingPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Policy {
    #[serde(rename = "dp-drop")]
    DpDrop,
    #[serde(rename = "ntp")]
    Ntp,
    #[serde(rename = "ntp-pw")]
    NtpPw,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::DpDrop, Policy::Ntp, Policy::NtpPw];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::DpDrop => "dp-drop",
            Self::Ntp => "ntp",
            Self::NtpPw => "ntp-pw",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dp-drop" => Ok(Self::DpDrop),
            "ntp" => Ok(Self::Ntp),
            "ntp-pw" => Ok(Self::NtpPw),
            other => Err(invalid(format!("unknown policy {other:?} (expected dp-drop, ntp or ntp-pw)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinibatchMode {
    /// Run every replica that can be formed, shrinking the minibatch.
    #[default]
    Variable,
    /// Keep the full minibatch, drawing on spares, or pause.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelConfig {
    pub tp: usize,
    pub pp: usize,
    pub dp: usize,
    pub domain_size: usize,
    pub local_batch: usize,
    pub seq_len: usize,
}

impl Default for ParallelConfig {
    fn default() -> Self {
        Self { tp: 32, pp: 8, dp: 128, domain_size: 32, local_batch: 8, seq_len: 16384 }
    }
}

impl ParallelConfig {
    pub fn validate(&self, cluster: &Cluster) -> Result<()> {
        if [self.tp, self.pp, self.dp, self.local_batch, self.seq_len].contains(&0) {
            return Err(invalid("parallel degrees, local batch and sequence length must be positive"));
        }
        if self.domain_size != cluster.domain_size {
            return Err(invalid(format!(
                "parallel config domain size {} differs from cluster domain size {}",
                self.domain_size, cluster.domain_size
            )));
        }
        if self.tp > self.domain_size || self.domain_size % self.tp != 0 {
            return Err(invalid(format!("tp {} must divide the domain size {}", self.tp, self.domain_size)));
        }
        if self.tp * self.pp * self.dp > cluster.total_gpus {
            return Err(invalid(format!(
                "tp*pp*dp = {} exceeds the cluster's {} GPUs",
                self.tp * self.pp * self.dp,
                cluster.total_gpus
            )));
        }
        Ok(())
    }

    pub fn slots_per_domain(&self) -> usize {
        self.domain_size / self.tp
    }

    /// Scale-up domains spanned by one replica; fractional when several
    /// replicas share a domain.
    pub fn domains_per_replica(&self) -> f64 {
        (self.tp * self.pp) as f64 / self.domain_size as f64
    }

    pub fn tokens_per_minibatch(&self) -> usize {
        self.dp * self.local_batch * self.seq_len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TpMode {
    Plain,
    Power,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TpRow {
    pub tp: usize,
    pub mode: TpMode,
    pub local_batch: usize,
    pub power: f64,
    pub rel_iter_time: f64,
}

/// Operating points for replicas below the full TP degree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReducedTpTable {
    pub full_tp: usize,
    pub full_local_batch: usize,
    pub rows: Vec<TpRow>,
}

impl ReducedTpTable {
    /// The published TP32 operating table.
    pub fn published() -> Self {
        let row = |tp, mode, local_batch, power, rel_iter_time| TpRow { tp, mode, local_batch, power, rel_iter_time };
        Self {
            full_tp: 32,
            full_local_batch: 8,
            rows: vec![
                row(30, TpMode::Plain, 7, 1.0, 1.002),
                row(30, TpMode::Power, 8, 1.15, 0.978),
                row(28, TpMode::Plain, 6, 1.0, 1.003),
                row(28, TpMode::Power, 8, 1.3, 0.999),
            ],
        }
    }

    /// No reduced operating points: any failure drops the slot.
    pub fn full_only(tp: usize, local_batch: usize) -> Self {
        Self { full_tp: tp, full_local_batch: local_batch, rows: Vec::new() }
    }

    /// Rows computed from the iteration-time model: for each degree in
    /// `ladder`, the largest local batch at nominal power whose iteration
    /// time stays within `1 + slack`, and the lowest grid power that keeps
    /// the full local batch within the same bound (or, if none does, the
    /// largest local batch at the top grid power).
    pub fn derived(model: &IterTimeModel, ladder: &[usize], grid: &[f64], slack: f64) -> Result<Self> {
        let limit = 1.0 + slack;
        let full_lb = model.local_batch;
        let best_lb = |tp: usize, power: f64| -> Result<Option<(usize, f64)>> {
            let mut best = None;
            for lb in 1..=full_lb {
                let t = model.replica_iter_time(tp, lb, power)?;
                if t <= limit {
                    best = Some((lb, t));
                }
            }
            Ok(best)
        };
        let mut rows = Vec::new();
        for &tp in ladder.iter().filter(|&&t| t < model.tp) {
            if let Some((lb, t)) = best_lb(tp, 1.0)? {
                rows.push(TpRow { tp, mode: TpMode::Plain, local_batch: lb, power: 1.0, rel_iter_time: t });
            }
            let mut power_row = None;
            for &p in grid.iter().filter(|&&p| p <= model.power.max_boost) {
                let t = model.replica_iter_time(tp, full_lb, p)?;
                if t <= limit {
                    power_row = Some((full_lb, p, t));
                    break;
                }
            }
            if power_row.is_none() {
                if let Some(&top) = grid.iter().filter(|&&p| p <= model.power.max_boost).last() {
                    power_row = best_lb(tp, top)?.map(|(lb, t)| (lb, top, t));
                }
            }
            if let Some((lb, p, t)) = power_row {
                rows.push(TpRow { tp, mode: TpMode::Power, local_batch: lb, power: p, rel_iter_time: t });
            }
        }
        Ok(Self { full_tp: model.tp, full_local_batch: full_lb, rows })
    }

    pub fn validate(&self) -> Result<()> {
        if self.full_tp == 0 || self.full_local_batch == 0 {
            return Err(invalid("full TP degree and local batch must be positive"));
        }
        for r in &self.rows {
            if r.tp == 0 || r.tp >= self.full_tp {
                return Err(invalid(format!("row TP {} must be in 1..{}", r.tp, self.full_tp)));
            }
            if r.local_batch == 0 || r.local_batch > self.full_local_batch {
                return Err(invalid(format!("row TP{} local batch {} out of range", r.tp, r.local_batch)));
            }
            if !(r.power >= 1.0 && r.rel_iter_time > 0.0) {
                return Err(invalid(format!("row TP{} has invalid power or iteration time", r.tp)));
            }
        }
        Ok(())
    }

    /// Allowed degrees, descending, full degree first.
    pub fn ladder(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.rows.iter().map(|r| r.tp).chain([self.full_tp]).collect();
        set.into_iter().rev().collect()
    }

    pub fn row(&self, tp: usize, mode: TpMode) -> Option<&TpRow> {
        self.rows.iter().find(|r| r.tp == tp && r.mode == mode)
    }

    /// The full-degree point followed by every row, for calibration.
    pub fn operating_points(&self) -> Vec<OperatingPoint> {
        std::iter::once(OperatingPoint { tp: self.full_tp, local_batch: self.full_local_batch, power: 1.0, rel_iter_time: 1.0 })
            .chain(self.rows.iter().map(|r| OperatingPoint {
                tp: r.tp,
                local_batch: r.local_batch,
                power: r.power,
                rel_iter_time: r.rel_iter_time,
            }))
            .collect()
    }
}

/// Largest allowed degree not exceeding the smallest healthy count, or
/// `None` when nothing on the ladder fits.
pub fn effective_tp(counts: &[usize], allowed: &[usize]) -> Result<Option<usize>> {
    if allowed.is_empty() {
        return Err(invalid("allowed TP set is empty"));
    }
    let min = counts.iter().copied().min().unwrap_or(0);
    Ok(allowed.iter().copied().filter(|&t| t <= min).max())
}

/// Healthy GPUs in each TP slot of the cluster.
pub fn slot_healthy_counts(state: &ClusterState, tp: usize) -> Vec<usize> {
    let cluster = state.cluster();
    if tp == cluster.domain_size {
        return state.domain_healthy_counts().to_vec();
    }
    (0..cluster.total_gpus / tp)
        .map(|s| (s * tp..(s + 1) * tp).filter(|&g| !state.is_down(g)).count())
        .collect()
}

/// Slot grouping produced by the resource manager before any policy is
/// applied.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Packing {
    /// Replicas of `pp` slot indices (stage order). Slots at or above the
    /// cluster's slot count are spares.
    pub groups: Vec<Vec<usize>>,
    /// Usable slots left over after forming complete replicas.
    pub unused: Vec<usize>,
    /// Slots below the bottom of the ladder.
    pub dead: Vec<usize>,
}

impl Packing {
    /// Replicas containing at least one partially failed slot.
    pub fn affected_replicas(&self, counts: &[usize], full_tp: usize) -> usize {
        self.groups
            .iter()
            .filter(|g| g.iter().any(|&s| s < counts.len() && counts[s] < full_tp))
            .count()
    }
}

/// Usable slots ordered fullest first, cluster slots before spares on
/// ties. Slots with fewer than `min_tp` healthy GPUs are left out.
fn slot_order(counts: &[usize], full_tp: usize, min_tp: usize, spare_slots: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..counts.len()).filter(|&s| counts[s] >= min_tp).collect();
    order.sort_by_key(|&s| (std::cmp::Reverse(counts[s].min(full_tp)), s));
    let healthy = order.partition_point(|&s| counts[s] >= full_tp);
    order.splice(healthy..healthy, counts.len()..counts.len() + spare_slots);
    order
}

/// Orders usable slots by healthy count, fullest first, and cuts the order
/// into replicas of `pp` slots. Partially failed slots end up together in
/// as few replicas as possible, and the leftover slots are the least
/// healthy ones. Slot indices at or above `counts.len()` are spares.
pub fn pack_failed_domains(counts: &[usize], full_tp: usize, min_tp: usize, pp: usize, spare_slots: usize) -> Packing {
    let order = slot_order(counts, full_tp, min_tp, spare_slots);
    let dead = (0..counts.len()).filter(|&s| counts[s] < min_tp).collect();
    let full = order.len() / pp * pp;
    Packing { groups: order[..full].chunks(pp).map(<[usize]>::to_vec).collect(), unused: order[full..].to_vec(), dead }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicaPlacement {
    /// Slot per pipeline stage.
    pub slots: Vec<usize>,
    /// TP degree each stage runs at.
    pub stage_tp: Vec<usize>,
    pub stage_power: Vec<f64>,
    pub local_batch: usize,
    pub rel_iter_time: f64,
    pub reduced: bool,
}

impl ReplicaPlacement {
    fn healthy(slots: Vec<usize>, tp: usize, lb: usize) -> Self {
        let pp = slots.len();
        Self { slots, stage_tp: vec![tp; pp], stage_power: vec![1.0; pp], local_batch: lb, rel_iter_time: 1.0, reduced: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Placement {
    pub policy: Policy,
    pub mode: MinibatchMode,
    pub replicas: Vec<ReplicaPlacement>,
    /// Sum of replica local batches relative to a full replica.
    pub contribution: f64,
    pub job_iter_time: f64,
    /// Delivered throughput relative to the healthy job on the cluster.
    pub throughput_frac: f64,
    pub paused: bool,
    pub replicas_reduced: usize,
    pub replicas_dropped: usize,
    pub spares_used: usize,
    pub reclaimable_gpus: usize,
    pub fleet_power: f64,
    pub minibatch_tokens: usize,
}

impl Placement {
    pub fn replicas_active(&self) -> usize {
        self.replicas.len()
    }
}

/// Turns slot health into placements for one policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Planner {
    cfg: ParallelConfig,
    table: ReducedTpTable,
    policy: Policy,
    mode: MinibatchMode,
    spare_domains: usize,
    ladder: Vec<usize>,
}

/// One stage's operating point.
#[derive(Debug, Clone, Copy)]
struct StageOption {
    tp: usize,
    local_batch: usize,
    power: f64,
    /// Replica iteration time, never below the healthy one.
    rel: f64,
}

impl Planner {
    pub fn new(cfg: ParallelConfig, table: ReducedTpTable, policy: Policy, mode: MinibatchMode, spare_domains: usize) -> Result<Self> {
        table.validate()?;
        if table.full_tp != cfg.tp || table.full_local_batch != cfg.local_batch {
            return Err(invalid(format!(
                "table is for TP{} local batch {}, config runs TP{} local batch {}",
                table.full_tp, table.full_local_batch, cfg.tp, cfg.local_batch
            )));
        }
        let spare_domains = if mode == MinibatchMode::Fixed { spare_domains } else { 0 };
        let ladder = if policy == Policy::DpDrop { vec![cfg.tp] } else { table.ladder() };
        Ok(Self { cfg, table, policy, mode, spare_domains, ladder })
    }

    pub fn with_spares(&self, spare_domains: usize) -> Self {
        Self { spare_domains: if self.mode == MinibatchMode::Fixed { spare_domains } else { 0 }, ..self.clone() }
    }

    pub fn config(&self) -> &ParallelConfig {
        &self.cfg
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn spare_domains(&self) -> usize {
        self.spare_domains
    }

    fn spare_slots(&self) -> usize {
        self.spare_domains * self.cfg.slots_per_domain()
    }

    fn count(&self, counts: &[usize], slot: usize) -> usize {
        counts.get(slot).copied().unwrap_or(self.cfg.tp).min(self.cfg.tp)
    }

    fn full_option(&self) -> StageOption {
        StageOption { tp: self.cfg.tp, local_batch: self.cfg.local_batch, power: 1.0, rel: 1.0 }
    }

    /// Best operating point on `count` healthy GPUs among rows of `mode`
    /// within `cap`: largest local batch, then fastest, then least power.
    fn best_option(&self, count: usize, mode: TpMode, cap: f64) -> Option<StageOption> {
        let full = (count >= self.cfg.tp).then(|| self.full_option());
        let rows = self.table.rows.iter().filter(|r| r.mode == mode && r.tp <= count && self.ladder.contains(&r.tp));
        let options = rows.map(|r| StageOption { tp: r.tp, local_batch: r.local_batch, power: r.power, rel: r.rel_iter_time.max(1.0) });
        full.into_iter()
            .chain(options)
            .filter(|o| o.rel <= cap)
            .max_by(|a, b| a.local_batch.cmp(&b.local_batch).then(b.rel.total_cmp(&a.rel)).then(b.power.total_cmp(&a.power)))
    }

    /// Replica on `slots` under `cap`, with its stranded healthy GPUs.
    fn group(&self, counts: &[usize], slots: &[usize], cap: f64) -> Option<(ReplicaPlacement, usize)> {
        let tp = self.cfg.tp;
        let c: Vec<usize> = slots.iter().map(|&s| self.count(counts, s)).collect();
        let min = *c.iter().min()?;
        if min >= tp {
            return Some((ReplicaPlacement::healthy(slots.to_vec(), tp, self.cfg.local_batch), 0));
        }
        let build = |stages: Vec<StageOption>| {
            let local_batch = stages.iter().map(|o| o.local_batch).min().unwrap_or(0);
            let rel_iter_time = stages.iter().map(|o| o.rel).fold(1.0, f64::max);
            let stranded = c.iter().zip(&stages).map(|(n, o)| n - o.tp).sum();
            let r = ReplicaPlacement {
                slots: slots.to_vec(),
                stage_tp: stages.iter().map(|o| o.tp).collect(),
                stage_power: stages.iter().map(|o| o.power).collect(),
                local_batch,
                rel_iter_time,
                reduced: true,
            };
            (r, stranded)
        };
        let plain = match self.policy {
            Policy::DpDrop => None,
            _ => self.best_option(min, TpMode::Plain, cap).map(|o| build(vec![o; slots.len()])),
        };
        let power = match self.policy {
            Policy::NtpPw => c
                .iter()
                .map(|&n| {
                    let full = (n >= tp).then(|| self.full_option());
                    full.or_else(|| self.best_option(n, TpMode::Power, cap))
                })
                .collect::<Option<Vec<_>>>()
                .map(build),
            _ => None,
        };
        match (plain, power) {
            (Some(pl), Some(pw)) => {
                let better = pw.0.local_batch > pl.0.local_batch || (pw.0.local_batch == pl.0.local_batch && pw.0.rel_iter_time < pl.0.rel_iter_time);
                Some(if better { pw } else { pl })
            }
            (pl, pw) => pl.or(pw),
        }
    }

    /// Placement when no replica may run slower than `cap`: slots are
    /// grouped fullest first, so a group's value is set by its least
    /// healthy slot, and groups are taken in that order.
    fn place_under_cap(&self, counts: &[usize], order: &[usize], cap: f64) -> Placement {
        let dp = self.cfg.dp as f64;
        let full_lb = self.cfg.local_batch as f64;
        let mut chosen: Vec<ReplicaPlacement> = Vec::new();
        let (mut reclaimable, mut contribution) = (0, 0.0);
        for slots in order.chunks_exact(self.cfg.pp) {
            let done = match self.mode {
                MinibatchMode::Variable => chosen.len() >= self.cfg.dp,
                MinibatchMode::Fixed => contribution >= dp - 1e-9,
            };
            if done {
                break;
            }
            // later groups are no healthier than this one
            let Some((r, stranded)) = self.group(counts, slots, cap) else { break };
            contribution += r.local_batch as f64 / full_lb;
            reclaimable += stranded;
            chosen.push(r);
        }

        let paused = self.mode == MinibatchMode::Fixed && contribution < dp - 1e-9;
        let job_iter_time = chosen.iter().map(|r| r.rel_iter_time).fold(1.0, f64::max);
        let delivered = match self.mode {
            MinibatchMode::Variable => contribution,
            MinibatchMode::Fixed => contribution.min(dp),
        };
        let throughput_frac = if paused { 0.0 } else { delivered / dp / job_iter_time };

        let n_slots = counts.len();
        let spd = self.cfg.slots_per_domain();
        let spares: BTreeSet<usize> = chosen.iter().flat_map(|r| r.slots.iter()).filter(|&&s| s >= n_slots).map(|s| (s - n_slots) / spd).collect();
        let (mut watts, mut gpus) = (0.0, 0usize);
        for r in &chosen {
            for (t, p) in r.stage_tp.iter().zip(&r.stage_power) {
                watts += *t as f64 * p;
                gpus += t;
            }
        }
        let lb_sum: usize = chosen.iter().map(|r| r.local_batch).sum();
        let minibatch_tokens = match (self.mode, paused) {
            (_, true) => 0,
            (MinibatchMode::Fixed, false) => self.cfg.tokens_per_minibatch(),
            (MinibatchMode::Variable, false) => lb_sum * self.cfg.seq_len,
        };
        Placement {
            policy: self.policy,
            mode: self.mode,
            replicas_reduced: chosen.iter().filter(|r| r.reduced).count(),
            replicas_dropped: self.cfg.dp.saturating_sub(chosen.len()),
            replicas: chosen,
            contribution,
            job_iter_time,
            throughput_frac,
            paused,
            spares_used: spares.len(),
            reclaimable_gpus: if paused { 0 } else { reclaimable },
            fleet_power: if gpus == 0 { 1.0 } else { watts / gpus as f64 },
            minibatch_tokens,
        }
    }

    /// Iteration-time caps worth trying: every distinct replica time the
    /// policy can produce.
    fn caps(&self) -> Vec<f64> {
        let modes: &[TpMode] = match self.policy {
            Policy::DpDrop => &[],
            Policy::Ntp => &[TpMode::Plain],
            Policy::NtpPw => &[TpMode::Plain, TpMode::Power],
        };
        let mut caps: Vec<f64> = self
            .table
            .rows
            .iter()
            .filter(|r| modes.contains(&r.mode) && self.ladder.contains(&r.tp))
            .map(|r| r.rel_iter_time.max(1.0))
            .chain([1.0])
            .collect();
        caps.sort_by(f64::total_cmp);
        caps.dedup();
        caps
    }

    /// Best placement for the given per-slot healthy counts.
    ///
    /// Every operating point a slot can take is monotone in its healthy
    /// count, so under a fixed cap on replica iteration time, grouping the
    /// fullest slots together maximizes delivered local batch. The best cap
    /// wins; ties keep the lower cap.
    pub fn plan(&self, counts: &[usize]) -> Result<Placement> {
        let tp = self.cfg.tp;
        if let Some(&c) = counts.iter().find(|&&c| c > tp) {
            return Err(invalid(format!("slot reports {c} healthy GPUs, more than TP{tp}")));
        }
        let min_tp = *self.ladder.last().unwrap_or(&tp);
        let order = slot_order(counts, tp, min_tp, self.spare_slots());
        let mut best: Option<Placement> = None;
        for cap in self.caps() {
            let p = self.place_under_cap(counts, &order, cap);
            let better = best.as_ref().is_none_or(|b| {
                (!p.paused && b.paused) || (p.paused == b.paused && p.throughput_frac > b.throughput_frac + 1e-12)
            });
            if better {
                best = Some(p);
            }
        }
        best.ok_or_else(|| invalid("no iteration-time cap to evaluate"))
    }

    pub fn plan_state(&self, state: &ClusterState) -> Result<Placement> {
        self.plan(&slot_healthy_counts(state, self.cfg.tp))
    }
}

/// Delivered throughput relative to a healthy cluster, with the minibatch
/// allowed to shrink and no spares.
pub fn availability(state: &ClusterState, cfg: &ParallelConfig, table: &ReducedTpTable, policy: Policy) -> Result<f64> {
    let planner = Planner::new(*cfg, table.clone(), policy, MinibatchMode::Variable, 0)?;
    Ok(planner.plan_state(state)?.throughput_frac)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SparesNeed {
    /// Smallest spare-domain count that never pauses, or `None` if even
    /// `max_spares` pauses at some instant.
    pub spares: Option<usize>,
    /// Replay step at which the largest need occurred.
    pub worst_state_index: usize,
}

/// Smallest spare count sustaining the fixed minibatch at `counts`.
pub fn spares_for_state(planner: &Planner, counts: &[usize], max_spares: usize) -> Result<Option<usize>> {
    let ok = |s: usize| -> Result<bool> { Ok(!planner.with_spares(s).plan(counts)?.paused) };
    if ok(0)? {
        return Ok(Some(0));
    }
    if !ok(max_spares)? {
        return Ok(None);
    }
    let (mut lo, mut hi) = (0, max_spares);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if ok(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Some(hi))
}

/// Smallest spare-domain count for which the fixed minibatch is sustained
/// at every instant of `trace`.
pub fn spares_needed(trace: &FailureTrace, cfg: &ParallelConfig, table: &ReducedTpTable, policy: Policy, max_spares: usize) -> Result<SparesNeed> {
    let planner = Planner::new(*cfg, table.clone(), policy, MinibatchMode::Fixed, 0)?;
    let mut replay = Replay::new(trace);
    let mut need = SparesNeed { spares: Some(0), worst_state_index: 0 };
    let mut index = 0;
    loop {
        let counts = slot_healthy_counts(replay.state(), cfg.tp);
        // only states that pause at the running maximum can raise it
        let current = need.spares.unwrap_or(0);
        if !planner.with_spares(current).plan(&counts)?.paused {
            if replay.advance().is_none() {
                break;
            }
            index += 1;
            continue;
        }
        match spares_for_state(&planner, &counts, max_spares)? {
            None => return Ok(SparesNeed { spares: None, worst_state_index: index }),
            Some(s) if Some(s) > need.spares => need = SparesNeed { spares: Some(s), worst_state_index: index },
            Some(_) => {}
        }
        if replay.advance().is_none() {
            break;
        }
        index += 1;
    }
    Ok(need)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(dp: usize) -> (ParallelConfig, ReducedTpTable) {
        (ParallelConfig { tp: 32, pp: 8, dp, domain_size: 32, local_batch: 8, seq_len: 16384 }, ReducedTpTable::published())
    }

    #[test]
    fn effective_tp_ladder() {
        let ladder = [32, 30, 28];
        assert_eq!(effective_tp(&[32, 32], &ladder).unwrap(), Some(32));
        assert_eq!(effective_tp(&[32, 31], &ladder).unwrap(), Some(30));
        assert_eq!(effective_tp(&[27], &ladder).unwrap(), None);
        assert!(effective_tp(&[32], &[]).is_err());
    }

    #[test]
    fn healthy_cluster_is_identity() {
        let (cfg, table) = toy(16);
        for policy in Policy::ALL {
            let p = Planner::new(cfg, table.clone(), policy, MinibatchMode::Variable, 0).unwrap().plan(&[32; 128]).unwrap();
            assert_eq!(p.throughput_frac, 1.0);
            assert_eq!(p.reclaimable_gpus, 0);
            assert_eq!(p.replicas_active(), 16);
            for (i, r) in p.replicas.iter().enumerate() {
                assert_eq!(r.slots, (i * 8..(i + 1) * 8).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn packing_puts_partial_domains_together() {
        let mut counts = vec![32; 128];
        for d in [3, 17, 40, 55, 70, 90, 100, 127] {
            counts[d] = 31;
        }
        let packing = pack_failed_domains(&counts, 32, 28, 8, 0);
        assert_eq!(packing.affected_replicas(&counts, 32), 1);
        let naive = (0..16).filter(|r| (r * 8..(r + 1) * 8).any(|d| counts[d] < 32)).count();
        assert_eq!(naive, 8);
    }

    #[test]
    fn stranded_gpus_in_reduced_replica() {
        let (cfg, table) = toy(16);
        let mut counts = vec![32; 128];
        counts[5] = 30;
        let p = Planner::new(cfg, table, Policy::Ntp, MinibatchMode::Variable, 0).unwrap().plan(&counts).unwrap();
        assert_eq!(p.replicas_reduced, 1);
        assert_eq!(p.reclaimable_gpus, (32 - 30) * 7);
        assert!((p.throughput_frac - (15.0 + 7.0 / 8.0) / 16.0 / 1.002).abs() < 1e-12);
    }

    #[test]
    fn power_boost_keeps_full_batch() {
        let (cfg, table) = toy(16);
        let mut counts = vec![32; 128];
        counts[5] = 31;
        counts[9] = 29;
        let p = Planner::new(cfg, table, Policy::NtpPw, MinibatchMode::Variable, 0).unwrap().plan(&counts).unwrap();
        assert_eq!(p.throughput_frac, 1.0);
        let r = p.replicas.iter().find(|r| r.reduced).unwrap();
        assert_eq!(r.local_batch, 8);
        assert!(r.stage_power.contains(&1.15) && r.stage_power.contains(&1.3));
        assert_eq!(p.reclaimable_gpus, 2);
        assert!(p.fleet_power > 1.0);
    }

    #[test]
    fn dp_drop_loses_whole_replicas() {
        let (cfg, table) = toy(16);
        let mut counts = vec![32; 128];
        counts[0] = 31;
        let p = Planner::new(cfg, table, Policy::DpDrop, MinibatchMode::Variable, 0).unwrap().plan(&counts).unwrap();
        assert_eq!(p.throughput_frac, 15.0 / 16.0);
        assert_eq!(p.reclaimable_gpus, 0);
        assert_eq!(p.replicas_dropped, 1);
    }

    #[test]
    fn fixed_mode_pauses_without_spares() {
        let (cfg, table) = toy(16);
        let mut counts = vec![32; 128];
        counts[0] = 31;
        let planner = Planner::new(cfg, table, Policy::DpDrop, MinibatchMode::Fixed, 0).unwrap();
        let p = planner.plan(&counts).unwrap();
        assert!(p.paused);
        assert_eq!(p.minibatch_tokens, 0);
        let p = planner.with_spares(1).plan(&counts).unwrap();
        assert!(!p.paused);
        assert_eq!(p.spares_used, 1);
        assert_eq!(spares_for_state(&planner, &counts, 10).unwrap(), Some(1));
    }

    #[test]
    fn table_ladder_and_points() {
        let t = ReducedTpTable::published();
        assert_eq!(t.ladder(), vec![32, 30, 28]);
        assert_eq!(t.operating_points().len(), 5);
        assert_eq!(t.row(30, TpMode::Power).unwrap().power, 1.15);
    }

    #[test]
    fn policy_names_round_trip() {
        for p in Policy::ALL {
            assert_eq!(p.as_str().parse::<Policy>().unwrap(), p);
            assert_eq!(serde_json::to_string(&p).unwrap(), format!("\"{p}\""));
        }
        assert!("ntp-x".parse::<Policy>().is_err());
    }
}
