//! Stochastic GPU failure traces and cluster state replay.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Failure rate per GPU per day that puts a 32768-GPU cluster above 0.1%
/// failed for 81% of a 15-day trace with 5-day hardware recovery, as
/// produced by [`calibrate_rate`] with [`OccupancyTarget::default`] and
/// seed 0.
pub const DEFAULT_RATE_PER_GPU_DAY: f64 = 4.5e-4;

pub const DEFAULT_HW_FRACTION: f64 = 0.78;

/// SplitMix64 finalizer, used to give each Monte-Carlo sample its own seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cluster {
    pub total_gpus: usize,
    /// GPUs per scale-up domain.
    pub domain_size: usize,
}

impl Cluster {
    pub fn new(total_gpus: usize, domain_size: usize) -> Result<Self> {
        let c = Self { total_gpus, domain_size };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_gpus == 0 || self.domain_size == 0 || self.total_gpus % self.domain_size != 0 {
            return Err(invalid(format!(
                "cluster of {} GPUs cannot be split into domains of {}",
                self.total_gpus, self.domain_size
            )));
        }
        Ok(())
    }

    pub fn n_domains(&self) -> usize {
        self.total_gpus / self.domain_size
    }

    pub fn domain_of(&self, gpu: usize) -> usize {
        gpu / self.domain_size
    }
}

impl Default for Cluster {
    fn default() -> Self {
        Self { total_gpus: 32768, domain_size: 32 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FailureModelConfig {
    pub rate_per_gpu_day: f64,
    pub hw_fraction: f64,
    pub hw_recovery_days: f64,
    pub sw_recovery_hours: f64,
    pub blast_radius: usize,
    pub rate_multiplier: f64,
}

impl Default for FailureModelConfig {
    fn default() -> Self {
        Self {
            rate_per_gpu_day: DEFAULT_RATE_PER_GPU_DAY,
            hw_fraction: DEFAULT_HW_FRACTION,
            hw_recovery_days: 5.0,
            sw_recovery_hours: 3.0,
            blast_radius: 1,
            rate_multiplier: 1.0,
        }
    }
}

impl FailureModelConfig {
    pub fn validate(&self, cluster: &Cluster) -> Result<()> {
        if !(self.rate_per_gpu_day >= 0.0 && self.rate_per_gpu_day.is_finite()) {
            return Err(invalid(format!("failure rate {} must be finite and >= 0", self.rate_per_gpu_day)));
        }
        if !(0.0..=1.0).contains(&self.hw_fraction) {
            return Err(invalid(format!("hw_fraction {} outside [0, 1]", self.hw_fraction)));
        }
        if !(self.hw_recovery_days > 0.0 && self.sw_recovery_hours > 0.0) {
            return Err(invalid("recovery times must be positive"));
        }
        if self.blast_radius == 0 || self.blast_radius > cluster.domain_size {
            return Err(invalid(format!(
                "blast radius {} outside [1, {}]",
                self.blast_radius, cluster.domain_size
            )));
        }
        if !(self.rate_multiplier >= 0.0 && self.rate_multiplier.is_finite()) {
            return Err(invalid("rate multiplier must be finite and >= 0"));
        }
        Ok(())
    }

    /// Events per day across the whole cluster.
    pub fn aggregate_rate(&self, cluster: &Cluster) -> f64 {
        self.rate_per_gpu_day * self.rate_multiplier * cluster.total_gpus as f64
    }

    pub fn sw_recovery_days(&self) -> f64 {
        self.sw_recovery_hours / 24.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Hardware,
    Software,
}

impl FailureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Hardware => "hardware",
            Self::Software => "software",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hardware" => Ok(Self::Hardware),
            "software" => Ok(Self::Software),
            other => Err(invalid(format!("unknown failure kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureEvent {
    pub time: f64,
    /// Sorted; all in one scale-up domain.
    pub gpu_ids: Vec<usize>,
    pub kind: FailureKind,
    pub recovery_days: f64,
}

impl FailureEvent {
    /// The affected GPUs are down on `[time, recovered_at)`.
    pub fn recovered_at(&self) -> f64 {
        self.time + self.recovery_days
    }

    pub fn covers(&self, t: f64) -> bool {
        self.time <= t && t < self.recovered_at()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailureTrace {
    pub cluster: Cluster,
    pub duration_days: f64,
    /// Sorted by time.
    pub events: Vec<FailureEvent>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    time_days: f64,
    gpu_ids: String,
    kind: String,
    recovery_days: f64,
}

impl FailureTrace {
    pub fn empty(cluster: Cluster, duration_days: f64) -> Self {
        Self { cluster, duration_days, events: Vec::new() }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for e in &self.events {
            let ids: Vec<String> = e.gpu_ids.iter().map(usize::to_string).collect();
            wr.serialize(CsvRow {
                time_days: e.time,
                gpu_ids: ids.join(";"),
                kind: e.kind.as_str().into(),
                recovery_days: e.recovery_days,
            })?;
        }
        if self.events.is_empty() {
            wr.write_record(["time_days", "gpu_ids", "kind", "recovery_days"])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads a trace written by [`FailureTrace::write_csv`] and checks that
    /// every event fits the cluster.
    pub fn read_csv<R: Read>(r: R, cluster: Cluster, duration_days: f64) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut events = Vec::new();
        for row in rd.deserialize() {
            let row: CsvRow = row?;
            let mut gpu_ids = row
                .gpu_ids
                .split(';')
                .map(|s| s.trim().parse::<usize>().map_err(|e| invalid(format!("gpu id {s:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            gpu_ids.sort_unstable();
            events.push(FailureEvent {
                time: row.time_days,
                gpu_ids,
                kind: FailureKind::parse(&row.kind)?,
                recovery_days: row.recovery_days,
            });
        }
        let trace = Self { cluster, duration_days, events };
        trace.validate()?;
        Ok(trace)
    }

    pub fn validate(&self) -> Result<()> {
        let mut prev = 0.0;
        for (i, e) in self.events.iter().enumerate() {
            if e.time < prev || e.time > self.duration_days {
                return Err(invalid(format!("event {i} at t={} is out of order or past the end", e.time)));
            }
            prev = e.time;
            if !(e.recovery_days > 0.0) {
                return Err(invalid(format!("event {i} has non-positive recovery time")));
            }
            let Some(&first) = e.gpu_ids.first() else {
                return Err(invalid(format!("event {i} affects no GPUs")));
            };
            let d = self.cluster.domain_of(first);
            if e.gpu_ids.iter().any(|&g| g >= self.cluster.total_gpus || self.cluster.domain_of(g) != d) {
                return Err(invalid(format!("event {i} spans domains or leaves the cluster")));
            }
        }
        Ok(())
    }
}

/// The `radius` GPUs of `seed`'s domain closest to it by index, ties broken
/// toward the lower index. Sets for increasing radii are nested.
pub fn blast_set(cluster: &Cluster, seed: usize, radius: usize) -> Vec<usize> {
    let base = cluster.domain_of(seed) * cluster.domain_size;
    let local = seed - base;
    let mut order: Vec<usize> = (0..cluster.domain_size).collect();
    order.sort_by_key(|&i| (i.abs_diff(local), i));
    let mut set: Vec<usize> = order[..radius.min(cluster.domain_size)].iter().map(|&i| base + i).collect();
    set.sort_unstable();
    set
}

/// Poisson failure arrivals over `duration_days`.
///
/// Arrival times, target GPUs and failure kinds come from separate streams
/// of one seed, so traces at different rates share their random numbers.
pub fn generate_trace(cluster: &Cluster, model: &FailureModelConfig, duration_days: f64, seed: u64) -> Result<FailureTrace> {
    cluster.validate()?;
    model.validate(cluster)?;
    if !(duration_days > 0.0 && duration_days.is_finite()) {
        return Err(invalid(format!("duration {duration_days} must be positive")));
    }
    let rate = model.aggregate_rate(cluster);
    let mut trace = FailureTrace::empty(*cluster, duration_days);
    if rate == 0.0 {
        return Ok(trace);
    }
    let stream = |s| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(s);
        r
    };
    let (mut time_rng, mut gpu_rng, mut kind_rng) = (stream(1), stream(2), stream(3));

    let g = cluster.total_gpus;
    let mut down_until = vec![f64::NEG_INFINITY; g];
    let mut t = 0.0;
    loop {
        let gap: f64 = time_rng.sample(Exp1);
        t += gap / rate;
        if t >= duration_days {
            break;
        }
        let hardware = kind_rng.random::<f64>() < model.hw_fraction;
        let target = loop {
            let c = gpu_rng.random_range(0..g);
            if down_until[c] <= t {
                break Some(c);
            }
            if down_until.iter().all(|&u| u > t) {
                break None;
            }
        };
        let Some(target) = target else { continue };
        let (kind, recovery_days) = if hardware {
            (FailureKind::Hardware, model.hw_recovery_days)
        } else {
            (FailureKind::Software, model.sw_recovery_days())
        };
        let gpu_ids = blast_set(cluster, target, model.blast_radius);
        for &id in &gpu_ids {
            down_until[id] = down_until[id].max(t + recovery_days);
        }
        trace.events.push(FailureEvent { time: t, gpu_ids, kind, recovery_days });
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    cluster: Cluster,
    /// Number of open events covering each GPU.
    cover: Vec<u32>,
    domain_healthy: Vec<usize>,
    failed: usize,
}

impl ClusterState {
    pub fn all_up(cluster: Cluster) -> Self {
        Self {
            cluster,
            cover: vec![0; cluster.total_gpus],
            domain_healthy: vec![cluster.domain_size; cluster.n_domains()],
            failed: 0,
        }
    }

    /// Marks an explicit set of GPUs as down, each covered once.
    pub fn with_failed(cluster: Cluster, gpus: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut s = Self::all_up(cluster);
        for g in gpus {
            if g >= cluster.total_gpus {
                return Err(Error::OutOfRange(format!("GPU {g} outside cluster of {}", cluster.total_gpus)));
            }
            if s.cover[g] == 0 {
                s.open(&[g]);
            }
        }
        Ok(s)
    }

    fn open(&mut self, gpus: &[usize]) {
        for &g in gpus {
            if self.cover[g] == 0 {
                self.failed += 1;
                self.domain_healthy[self.cluster.domain_of(g)] -= 1;
            }
            self.cover[g] += 1;
        }
    }

    fn close(&mut self, gpus: &[usize]) {
        for &g in gpus {
            self.cover[g] -= 1;
            if self.cover[g] == 0 {
                self.failed -= 1;
                self.domain_healthy[self.cluster.domain_of(g)] += 1;
            }
        }
    }

    pub fn cluster(&self) -> &Cluster {
        &self.cluster
    }

    pub fn is_down(&self, gpu: usize) -> bool {
        self.cover[gpu] > 0
    }

    pub fn failed_count(&self) -> usize {
        self.failed
    }

    pub fn failed_fraction(&self) -> f64 {
        self.failed as f64 / self.cluster.total_gpus as f64
    }

    pub fn domain_healthy_counts(&self) -> &[usize] {
        &self.domain_healthy
    }

    /// Domains with at least one failed GPU.
    pub fn unhealthy_domains(&self) -> usize {
        self.domain_healthy.iter().filter(|&&h| h < self.cluster.domain_size).count()
    }
}

/// State at time `t`: events with `time <= t` that have not recovered by `t`.
pub fn state_at(trace: &FailureTrace, t: f64) -> Result<ClusterState> {
    if !(0.0..=trace.duration_days).contains(&t) {
        return Err(Error::OutOfRange(format!("t={t} outside [0, {}]", trace.duration_days)));
    }
    let mut s = ClusterState::all_up(trace.cluster);
    for e in trace.events.iter().take_while(|e| e.time <= t) {
        if e.covers(t) {
            s.open(&e.gpu_ids);
        }
    }
    Ok(s)
}

/// Walks a trace change point by change point, updating one state in place.
#[derive(Debug, Clone)]
pub struct Replay<'a> {
    trace: &'a FailureTrace,
    /// `(time, event index, opens)` sorted by time.
    changes: Vec<(f64, usize, bool)>,
    pos: usize,
    time: f64,
    state: ClusterState,
}

impl<'a> Replay<'a> {
    pub fn new(trace: &'a FailureTrace) -> Self {
        let mut changes = Vec::with_capacity(trace.events.len() * 2);
        for (i, e) in trace.events.iter().enumerate() {
            changes.push((e.time, i, true));
            if e.recovered_at() <= trace.duration_days {
                changes.push((e.recovered_at(), i, false));
            }
        }
        changes.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut replay = Self { trace, changes, pos: 0, time: 0.0, state: ClusterState::all_up(trace.cluster) };
        replay.apply_through(0.0);
        replay
    }

    fn apply_through(&mut self, t: f64) {
        while let Some(&(ct, i, opens)) = self.changes.get(self.pos) {
            if ct > t {
                break;
            }
            let gpus = &self.trace.events[i].gpu_ids;
            if opens {
                self.state.open(gpus);
            } else {
                self.state.close(gpus);
            }
            self.pos += 1;
        }
        self.time = t;
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn state(&self) -> &ClusterState {
        &self.state
    }

    /// Next instant within the trace at which the state may change.
    pub fn next_time(&self) -> Option<f64> {
        self.changes.get(self.pos).map(|c| c.0).filter(|&t| t < self.trace.duration_days)
    }

    /// Applies every change at the next change point and returns its time.
    pub fn advance(&mut self) -> Option<f64> {
        let t = self.next_time()?;
        self.apply_through(t);
        Some(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceStats {
    /// Fraction of the trace with strictly more than `threshold` of GPUs down.
    pub occupancy_above: f64,
    pub threshold: f64,
    pub peak_failed: usize,
    pub peak_unhealthy_domains: usize,
    /// Time-weighted mean failed-GPU count.
    pub mean_failed: f64,
}

pub fn trace_stats(trace: &FailureTrace, threshold: f64) -> TraceStats {
    let mut replay = Replay::new(trace);
    let limit = threshold * trace.cluster.total_gpus as f64;
    let (mut above, mut weighted) = (0.0, 0.0);
    let (mut peak, mut peak_domains) = (0, 0);
    loop {
        let s = replay.state();
        peak = peak.max(s.failed_count());
        peak_domains = peak_domains.max(s.unhealthy_domains());
        let start = replay.time();
        let end = replay.next_time().unwrap_or(trace.duration_days);
        let dt = end - start;
        weighted += dt * s.failed_count() as f64;
        if s.failed_count() as f64 > limit {
            above += dt;
        }
        if replay.advance().is_none() {
            break;
        }
    }
    TraceStats {
        occupancy_above: above / trace.duration_days,
        threshold,
        peak_failed: peak,
        peak_unhealthy_domains: peak_domains,
        mean_failed: weighted / trace.duration_days,
    }
}

/// Statistics over the traces for `seeds` consecutive derived seeds.
pub fn ensemble_stats(
    cluster: &Cluster,
    model: &FailureModelConfig,
    duration_days: f64,
    threshold: f64,
    seeds: usize,
    seed: u64,
) -> Result<Vec<TraceStats>> {
    (0..seeds as u64)
        .into_par_iter()
        .map(|i| Ok(trace_stats(&generate_trace(cluster, model, duration_days, derive_seed(seed, i))?, threshold)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OccupancyTarget {
    /// Target fraction of time above the threshold.
    pub occupancy: f64,
    pub threshold: f64,
    pub duration_days: f64,
    pub seeds: usize,
    /// Accepted distance from the target, as a fraction.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for OccupancyTarget {
    fn default() -> Self {
        Self { occupancy: 0.81, threshold: 1e-3, duration_days: 15.0, seeds: 20, tolerance: 0.01, max_iterations: 60 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Calibration {
    pub rate_per_gpu_day: f64,
    pub achieved_occupancy: f64,
    pub iterations: usize,
}

/// Bisects the per-GPU failure rate until the mean occupancy over the seed
/// ensemble is within tolerance of the target.
pub fn calibrate_rate(cluster: &Cluster, model: &FailureModelConfig, target: &OccupancyTarget, seed: u64) -> Result<Calibration> {
    if !(0.0..1.0).contains(&target.occupancy) {
        return Err(invalid(format!("occupancy target {} outside [0, 1)", target.occupancy)));
    }
    if target.occupancy == 0.0 {
        return Ok(Calibration { rate_per_gpu_day: 0.0, achieved_occupancy: 0.0, iterations: 0 });
    }
    let occupancy = |rate: f64| -> Result<f64> {
        let m = FailureModelConfig { rate_per_gpu_day: rate, ..*model };
        let stats = ensemble_stats(cluster, &m, target.duration_days, target.threshold, target.seeds, seed)?;
        Ok(stats.iter().map(|s| s.occupancy_above).sum::<f64>() / stats.len() as f64)
    };

    let mut iterations = 0;
    let (mut lo, mut hi) = (0.0, 1e-4);
    let mut occ_hi = occupancy(hi)?;
    while occ_hi < target.occupancy {
        iterations += 1;
        if iterations > target.max_iterations {
            return Err(Error::NonConvergence {
                iterations,
                detail: format!("occupancy {occ_hi:.4} at rate {hi:e} still below target"),
            });
        }
        lo = hi;
        hi *= 2.0;
        occ_hi = occupancy(hi)?;
    }
    if (occ_hi - target.occupancy).abs() <= target.tolerance {
        return Ok(Calibration { rate_per_gpu_day: hi, achieved_occupancy: occ_hi, iterations });
    }
    let mut last = (hi, occ_hi);
    while iterations < target.max_iterations {
        iterations += 1;
        let mid = 0.5 * (lo + hi);
        let occ = occupancy(mid)?;
        last = (mid, occ);
        if (occ - target.occupancy).abs() <= target.tolerance {
            return Ok(Calibration { rate_per_gpu_day: mid, achieved_occupancy: occ, iterations });
        }
        if occ < target.occupancy {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::NonConvergence {
        iterations,
        detail: format!("last rate {:e} gave occupancy {:.4}, target {:.4}", last.0, last.1, target.occupancy),
    })
}
