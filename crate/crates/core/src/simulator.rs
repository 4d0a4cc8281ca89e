//! Event-driven bulk-synchronous training simulation and the Monte-Carlo
//! sweeps built on it.

use std::io::Write;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::failure::{blast_set, derive_seed, generate_trace, Cluster, ClusterState, FailureModelConfig, FailureTrace, Replay};
use crate::policy::{slot_healthy_counts, spares_needed, MinibatchMode, ParallelConfig, Placement, Planner, Policy, ReducedTpTable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub cluster: Cluster,
    pub parallel: ParallelConfig,
    pub failure: FailureModelConfig,
    pub table: ReducedTpTable,
    pub policy: Policy,
    pub mode: MinibatchMode,
    pub spare_domains: usize,
    /// Zero-throughput interval after every reconfiguration.
    pub restart_delay_days: f64,
    pub duration_days: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            cluster: Cluster::default(),
            parallel: ParallelConfig::default(),
            failure: FailureModelConfig::default(),
            table: ReducedTpTable::published(),
            policy: Policy::Ntp,
            mode: MinibatchMode::Variable,
            spare_domains: 0,
            restart_delay_days: 0.0,
            duration_days: 15.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.cluster.validate()?;
        self.failure.validate(&self.cluster)?;
        self.parallel.validate(&self.cluster)?;
        self.table.validate()?;
        if !(self.duration_days > 0.0 && self.duration_days.is_finite()) {
            return Err(invalid("duration must be positive"));
        }
        if !(self.restart_delay_days >= 0.0 && self.restart_delay_days.is_finite()) {
            return Err(invalid("restart delay must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn planner(&self) -> Result<Planner> {
        Planner::new(self.parallel, self.table.clone(), self.policy, self.mode, self.spare_domains)
    }

    /// Spare GPUs counted in per-GPU throughput; zero in variable mode.
    pub fn spare_gpus(&self) -> usize {
        match self.mode {
            MinibatchMode::Fixed => self.spare_domains * self.cluster.domain_size,
            MinibatchMode::Variable => 0,
        }
    }
}

/// One piecewise-constant segment of the time series, starting at `t_days`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub t_days: f64,
    pub throughput_frac: f64,
    pub minibatch_tokens: usize,
    pub replicas_active: usize,
    pub replicas_reduced: usize,
    pub replicas_dropped: usize,
    pub spares_used: usize,
    pub reclaimable_gpus: usize,
    pub fleet_power: f64,
}

impl SeriesRow {
    fn from_placement(t: f64, p: &Placement) -> Self {
        Self {
            t_days: t,
            throughput_frac: p.throughput_frac,
            minibatch_tokens: p.minibatch_tokens,
            replicas_active: p.replicas_active(),
            replicas_reduced: p.replicas_reduced,
            replicas_dropped: p.replicas_dropped,
            spares_used: p.spares_used,
            reclaimable_gpus: p.reclaimable_gpus,
            fleet_power: p.fleet_power,
        }
    }

    fn restarting(t: f64, p: &Placement) -> Self {
        Self { throughput_frac: 0.0, minibatch_tokens: 0, ..Self::from_placement(t, p) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportSummary {
    pub policy: Policy,
    pub mode: MinibatchMode,
    pub spare_domains: usize,
    pub duration_days: f64,
    pub events: usize,
    /// Time-weighted mean of `throughput_frac`.
    pub mean_throughput_frac: f64,
    pub mean_throughput_loss: f64,
    /// Mean throughput per GPU including spares, relative to a healthy
    /// cluster without spares.
    pub throughput_per_gpu: f64,
    pub pause_fraction: f64,
    pub min_throughput_frac: f64,
    pub peak_spares_used: usize,
    pub max_reclaimable_gpus: usize,
    /// Time-weighted shortfall of minibatch tokens relative to the target.
    pub mean_minibatch_deficit: f64,
    pub mean_fleet_power: f64,
    pub max_fleet_power: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThroughputReport {
    pub rows: Vec<SeriesRow>,
    pub summary: ReportSummary,
}

impl ThroughputReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wr.serialize(r)?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn same_layout(a: &Placement, b: &Placement) -> bool {
    a.paused == b.paused
        && a.replicas.len() == b.replicas.len()
        && a.replicas.iter().zip(&b.replicas).all(|(x, y)| x.slots == y.slots && x.stage_tp == y.stage_tp)
}

/// Generates the trace for `cfg.seed` and simulates it.
pub fn run(cfg: &SimConfig) -> Result<ThroughputReport> {
    cfg.validate()?;
    let trace = generate_trace(&cfg.cluster, &cfg.failure, cfg.duration_days, cfg.seed)?;
    run_trace(cfg, &trace)
}

/// Simulates a given trace: the placement is recomputed at every failure
/// and recovery, and the job runs at the speed of its slowest replica.
pub fn run_trace(cfg: &SimConfig, trace: &FailureTrace) -> Result<ThroughputReport> {
    cfg.validate()?;
    if trace.cluster != cfg.cluster {
        return Err(invalid("trace was generated for a different cluster"));
    }
    let planner = cfg.planner()?;
    let duration = trace.duration_days;
    let mut replay = Replay::new(trace);
    let mut rows: Vec<SeriesRow> = Vec::new();
    let mut prev: Option<Placement> = None;
    loop {
        let t = replay.time();
        let next = replay.next_time().unwrap_or(duration);
        let placement = planner.plan_state(replay.state())?;
        let changed = prev.as_ref().is_some_and(|p| !same_layout(p, &placement));
        if changed && cfg.restart_delay_days > 0.0 {
            rows.push(SeriesRow::restarting(t, &placement));
            let resume = t + cfg.restart_delay_days;
            if resume < next {
                rows.push(SeriesRow::from_placement(resume, &placement));
            }
        } else {
            rows.push(SeriesRow::from_placement(t, &placement));
        }
        prev = Some(placement);
        if replay.advance().is_none() {
            break;
        }
    }
    // drop zero-length segments from coincident change points
    rows.dedup_by(|later, earlier| {
        if later.t_days == earlier.t_days {
            *earlier = later.clone();
            true
        } else {
            false
        }
    });
    let summary = summarize(cfg, trace.events.len(), duration, &rows);
    Ok(ThroughputReport { rows, summary })
}

fn summarize(cfg: &SimConfig, events: usize, duration: f64, rows: &[SeriesRow]) -> ReportSummary {
    let target = cfg.parallel.tokens_per_minibatch() as f64;
    let (mut tp, mut paused, mut deficit, mut power) = (0.0, 0.0, 0.0, 0.0);
    for (i, r) in rows.iter().enumerate() {
        let end = rows.get(i + 1).map_or(duration, |n| n.t_days);
        let dt = end - r.t_days;
        tp += dt * r.throughput_frac;
        if r.throughput_frac == 0.0 {
            paused += dt;
        }
        deficit += dt * (1.0 - r.minibatch_tokens as f64 / target).max(0.0);
        power += dt * r.fleet_power;
    }
    let mean = tp / duration;
    let g = cfg.cluster.total_gpus as f64;
    ReportSummary {
        policy: cfg.policy,
        mode: cfg.mode,
        spare_domains: if cfg.mode == MinibatchMode::Fixed { cfg.spare_domains } else { 0 },
        duration_days: duration,
        events,
        mean_throughput_frac: mean,
        mean_throughput_loss: 1.0 - mean,
        throughput_per_gpu: mean * g / (g + cfg.spare_gpus() as f64),
        pause_fraction: paused / duration,
        min_throughput_frac: rows.iter().map(|r| r.throughput_frac).fold(f64::INFINITY, f64::min),
        peak_spares_used: rows.iter().map(|r| r.spares_used).max().unwrap_or(0),
        max_reclaimable_gpus: rows.iter().map(|r| r.reclaimable_gpus).max().unwrap_or(0),
        mean_minibatch_deficit: deficit / duration,
        mean_fleet_power: power / duration,
        max_fleet_power: rows.iter().map(|r| r.fleet_power).fold(1.0, f64::max),
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl LossStats {
    pub fn from_samples(mut v: Vec<f64>) -> Self {
        v.sort_by(f64::total_cmp);
        let mean = if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        Self { mean, median: median(&v), min: v.first().copied().unwrap_or(0.0), max: v.last().copied().unwrap_or(0.0) }
    }
}

/// Distinct GPUs chosen uniformly at random.
pub fn sample_failed_gpus(total_gpus: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = index::sample(&mut rng, total_gpus, count.min(total_gpus)).into_vec();
    v.sort_unstable();
    v
}

fn failed_count(total_gpus: usize, fraction: f64) -> usize {
    (fraction * total_gpus as f64).round() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AvailabilityPoint {
    pub tp: usize,
    pub failed_fraction: f64,
    pub failed_gpus: usize,
    /// Lost fraction of cluster throughput under DP-DROP.
    pub lost: LossStats,
}

/// Lost fraction under DP-DROP for uniformly placed failures, with one TP
/// group per scale-up domain and no pipeline parallelism.
pub fn monte_carlo_availability(total_gpus: usize, tps: &[usize], fractions: &[f64], samples: usize, seed: u64) -> Result<Vec<AvailabilityPoint>> {
    let mut out = Vec::new();
    for &tp in tps {
        let cluster = Cluster::new(total_gpus, tp)?;
        let cfg = ParallelConfig { tp, pp: 1, dp: total_gpus / tp, domain_size: tp, local_batch: 1, seq_len: 1 };
        cfg.validate(&cluster)?;
        let planner = Planner::new(cfg, ReducedTpTable::full_only(tp, 1), Policy::DpDrop, MinibatchMode::Variable, 0)?;
        for (fi, &f) in fractions.iter().enumerate() {
            if !(0.0..1.0).contains(&f) {
                return Err(invalid(format!("failed fraction {f} outside [0, 1)")));
            }
            let n = failed_count(total_gpus, f);
            let losses = (0..samples as u64)
                .into_par_iter()
                .map(|i| {
                    let gpus = sample_failed_gpus(total_gpus, n, derive_seed(seed, (fi as u64) << 32 | i));
                    let state = ClusterState::with_failed(cluster, gpus)?;
                    Ok(1.0 - planner.plan_state(&state)?.throughput_frac)
                })
                .collect::<Result<Vec<f64>>>()?;
            out.push(AvailabilityPoint { tp, failed_fraction: f, failed_gpus: n, lost: LossStats::from_samples(losses) });
        }
    }
    Ok(out)
}

/// Static failure snapshots shared by the snapshot sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SnapshotConfig {
    pub cluster: Cluster,
    pub parallel: ParallelConfig,
    pub table: ReducedTpTable,
    pub policies: Vec<Policy>,
    pub samples: usize,
    pub seed: u64,
}

impl Default for SnapshotConfig {
    fn default() -> Self {
        Self {
            cluster: Cluster::default(),
            parallel: ParallelConfig::default(),
            table: ReducedTpTable::published(),
            policies: Policy::ALL.to_vec(),
            samples: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyLoss {
    pub policy: Policy,
    pub loss: LossStats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    /// Failed fraction for a fraction sweep, event fraction for a blast
    /// radius sweep.
    pub failed_fraction: f64,
    pub blast_radius: usize,
    pub losses: Vec<PolicyLoss>,
    /// Samples on which some policy did worse than one it should dominate.
    pub dominance_violations: usize,
}

impl SweepPoint {
    pub fn loss(&self, policy: Policy) -> Option<&LossStats> {
        self.losses.iter().find(|l| l.policy == policy).map(|l| &l.loss)
    }
}

fn snapshot_point(cfg: &SnapshotConfig, planners: &[Planner], events: usize, radius: usize, point_seed: u64) -> Result<(Vec<Vec<f64>>, usize)> {
    let per_sample = (0..cfg.samples as u64)
        .into_par_iter()
        .map(|i| {
            let seeds = sample_failed_gpus(cfg.cluster.total_gpus, events, derive_seed(point_seed, i));
            let gpus = seeds.iter().flat_map(|&g| blast_set(&cfg.cluster, g, radius));
            let state = ClusterState::with_failed(cfg.cluster, gpus)?;
            let counts = slot_healthy_counts(&state, cfg.parallel.tp);
            planners.iter().map(|p| Ok(1.0 - p.plan(&counts)?.throughput_frac)).collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut violations = 0;
    for s in &per_sample {
        let loss_of = |p: Policy| cfg.policies.iter().position(|&q| q == p).map(|i| s[i]);
        let chain = [Policy::DpDrop, Policy::Ntp, Policy::NtpPw].map(loss_of);
        let present: Vec<f64> = chain.into_iter().flatten().collect();
        if present.windows(2).any(|w| w[1] > w[0] + 1e-12) {
            violations += 1;
        }
    }
    let by_policy = (0..planners.len()).map(|j| per_sample.iter().map(|s| s[j]).collect()).collect();
    Ok((by_policy, violations))
}

fn snapshot_planners(cfg: &SnapshotConfig) -> Result<Vec<Planner>> {
    cfg.cluster.validate()?;
    cfg.parallel.validate(&cfg.cluster)?;
    let mut policies = cfg.policies.clone();
    policies.sort();
    if policies.windows(2).any(|w| w[0] == w[1]) || policies.is_empty() {
        return Err(invalid("policy list must be non-empty without duplicates"));
    }
    cfg.policies.iter().map(|&p| Planner::new(cfg.parallel, cfg.table.clone(), p, MinibatchMode::Variable, 0)).collect()
}

/// Mean, median and extreme throughput loss per policy for uniformly
/// placed single-GPU failures, with the minibatch allowed to shrink. Every
/// policy sees the same failure samples.
pub fn fraction_sweep(cfg: &SnapshotConfig, fractions: &[f64]) -> Result<Vec<SweepPoint>> {
    let planners = snapshot_planners(cfg)?;
    fractions
        .iter()
        .enumerate()
        .map(|(fi, &f)| {
            if !(0.0..1.0).contains(&f) {
                return Err(invalid(format!("failed fraction {f} outside [0, 1)")));
            }
            let n = failed_count(cfg.cluster.total_gpus, f);
            let (losses, violations) = snapshot_point(cfg, &planners, n, 1, derive_seed(cfg.seed, fi as u64))?;
            Ok(SweepPoint {
                failed_fraction: f,
                blast_radius: 1,
                losses: cfg.policies.iter().zip(losses).map(|(&policy, v)| PolicyLoss { policy, loss: LossStats::from_samples(v) }).collect(),
                dominance_violations: violations,
            })
        })
        .collect()
}

/// Loss per policy when each of `event_fraction * total_gpus` failure
/// events takes out `radius` co-located GPUs. The event sites are shared
/// across radii, so only the blast size changes between points.
pub fn blast_radius_sweep(cfg: &SnapshotConfig, event_fraction: f64, radii: &[usize]) -> Result<Vec<SweepPoint>> {
    let planners = snapshot_planners(cfg)?;
    if !(0.0..1.0).contains(&event_fraction) {
        return Err(invalid(format!("event fraction {event_fraction} outside [0, 1)")));
    }
    let n = failed_count(cfg.cluster.total_gpus, event_fraction);
    radii
        .iter()
        .map(|&r| {
            if r == 0 || r > cfg.cluster.domain_size {
                return Err(invalid(format!("blast radius {r} outside [1, {}]", cfg.cluster.domain_size)));
            }
            let (losses, violations) = snapshot_point(cfg, &planners, n, r, derive_seed(cfg.seed, 0))?;
            Ok(SweepPoint {
                failed_fraction: event_fraction,
                blast_radius: r,
                losses: cfg.policies.iter().zip(losses).map(|(&policy, v)| PolicyLoss { policy, loss: LossStats::from_samples(v) }).collect(),
                dominance_violations: violations,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparesPoint {
    pub policy: Policy,
    pub spare_domains: usize,
    /// Mean over seeds of per-GPU throughput including spares.
    pub throughput_per_gpu: f64,
    pub pause_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparesRequirement {
    pub policy: Policy,
    /// Smallest spare count with zero pause time on every seed.
    pub required: Option<usize>,
    pub per_seed: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparesSweep {
    pub points: Vec<SparesPoint>,
    pub requirements: Vec<SparesRequirement>,
}

/// Fixed-minibatch runs over `seeds` traces for every policy and spare
/// count, plus the spare demand of each trace.
pub fn spares_sweep(base: &SimConfig, policies: &[Policy], spare_counts: &[usize], seeds: usize, max_spares: usize) -> Result<SparesSweep> {
    base.validate()?;
    let traces = (0..seeds as u64)
        .into_par_iter()
        .map(|i| generate_trace(&base.cluster, &base.failure, base.duration_days, derive_seed(base.seed, i)))
        .collect::<Result<Vec<_>>>()?;
    let mut points = Vec::new();
    let mut requirements = Vec::new();
    for &policy in policies {
        for &s in spare_counts {
            let cfg = SimConfig { policy, mode: MinibatchMode::Fixed, spare_domains: s, ..base.clone() };
            let reports = traces.par_iter().map(|t| run_trace(&cfg, t)).collect::<Result<Vec<_>>>()?;
            let n = reports.len().max(1) as f64;
            points.push(SparesPoint {
                policy,
                spare_domains: s,
                throughput_per_gpu: reports.iter().map(|r| r.summary.throughput_per_gpu).sum::<f64>() / n,
                pause_fraction: reports.iter().map(|r| r.summary.pause_fraction).sum::<f64>() / n,
            });
        }
        let per_seed = traces
            .par_iter()
            .map(|t| Ok(spares_needed(t, &base.parallel, &base.table, policy, max_spares)?.spares))
            .collect::<Result<Vec<_>>>()?;
        let required = per_seed.iter().try_fold(0usize, |acc, s| s.map(|v| acc.max(v)));
        requirements.push(SparesRequirement { policy, required, per_seed });
    }
    Ok(SparesSweep { points, requirements })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_trace_is_lossless() {
        let cfg = SimConfig { failure: FailureModelConfig { rate_per_gpu_day: 0.0, ..Default::default() }, ..Default::default() };
        let r = run(&cfg).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.summary.mean_throughput_loss, 0.0);
        assert_eq!(r.summary.pause_fraction, 0.0);
    }

    #[test]
    fn restart_delay_charges_reconfigurations() {
        let base = SimConfig { duration_days: 5.0, seed: 3, ..Default::default() };
        let r0 = run(&base).unwrap();
        let r1 = run(&SimConfig { restart_delay_days: 0.01, ..base }).unwrap();
        assert!(r1.summary.mean_throughput_frac < r0.summary.mean_throughput_frac);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[1.0, 2.0, 3.0]), 2.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]), 2.5);
    }

    #[test]
    fn zero_fraction_loses_nothing() {
        let pts = monte_carlo_availability(4096, &[8, 64], &[0.0], 3, 1).unwrap();
        assert!(pts.iter().all(|p| p.lost.max == 0.0));
    }

    #[test]
    fn sampled_failures_are_distinct() {
        let v = sample_failed_gpus(100, 40, 5);
        let mut d = v.clone();
        d.dedup();
        assert_eq!(d.len(), 40);
    }
}
