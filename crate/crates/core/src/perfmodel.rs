//! Coarse analytic performance model for replicas running at a reduced TP
//! degree, optionally power boosted.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::shardmap::{build_reshard_plan, build_shard_map, ReshardDirection};

/// Power levels a boosted domain may run at.
pub const POWER_GRID: [f64; 3] = [1.0, 1.15, 1.3];

/// Slack used when comparing a performance factor against a work ratio.
const FACTOR_SLACK: f64 = 1e-12;

/// Measured perf/watt at a few power factors, piecewise linear between
/// anchors and extrapolated along the last segment up to `max_boost`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerCurve {
    /// `(power_factor, perf_per_watt)`, ascending in power, starting at 1.0.
    pub anchors: Vec<(f64, f64)>,
    pub max_boost: f64,
}

impl Default for PowerCurve {
    fn default() -> Self {
        Self { anchors: vec![(1.0, 1.0), (1.1, 0.972), (1.2, 0.935)], max_boost: 1.3 }
    }
}

impl PowerCurve {
    pub fn validate(&self) -> Result<()> {
        if self.anchors.len() < 2 || self.anchors[0] != (1.0, 1.0) {
            return Err(invalid("power curve needs at least two anchors starting at (1.0, 1.0)"));
        }
        if self.anchors.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(invalid("power curve anchors must be strictly increasing in power"));
        }
        if self.max_boost < 1.0 {
            return Err(invalid("max boost below nominal power"));
        }
        Ok(())
    }

    pub fn perf_per_watt(&self, power: f64) -> Result<f64> {
        if !(1.0..=self.max_boost).contains(&power) {
            return Err(Error::OutOfRange(format!("power factor {power} outside [1.0, {}]", self.max_boost)));
        }
        let seg = self
            .anchors
            .windows(2)
            .position(|w| power <= w[1].0)
            .unwrap_or(self.anchors.len() - 2);
        let ((p0, v0), (p1, v1)) = (self.anchors[seg], self.anchors[seg + 1]);
        Ok(v0 + (v1 - v0) * (power - p0) / (p1 - p0))
    }

    /// Compute throughput relative to nominal power.
    pub fn perf_factor(&self, power: f64) -> Result<f64> {
        Ok(power * self.perf_per_watt(power)?)
    }

    /// Smallest power in `[1, max_boost]` reaching `required` performance,
    /// or `None` if even the cap falls short.
    pub fn continuous_boost(&self, required: f64) -> Result<Option<f64>> {
        if required <= 1.0 {
            return Ok(Some(1.0));
        }
        if self.perf_factor(self.max_boost)? + FACTOR_SLACK < required {
            return Ok(None);
        }
        let (mut lo, mut hi) = (1.0, self.max_boost);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if self.perf_factor(mid)? >= required {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(Some(hi))
    }
}

/// Work per GPU when `n1` shards are reassigned onto `n2` GPUs.
pub fn work_ratio(n1: usize, n2: usize, head_imbalance: f64) -> f64 {
    n1 as f64 / n2 as f64 * head_imbalance
}

/// Smallest grid power whose performance covers the extra work of running
/// `n1` shards on `n2` GPUs, or `None` when the grid tops out first.
pub fn min_boost_power(curve: &PowerCurve, grid: &[f64], n1: usize, n2: usize, head_imbalance: f64) -> Result<Option<f64>> {
    if n2 == 0 || n2 > n1 {
        return Err(invalid(format!("reduced degree {n2} must be in 1..={n1}")));
    }
    let required = work_ratio(n1, n2, head_imbalance);
    for &p in grid {
        if p > curve.max_boost {
            break;
        }
        if curve.perf_factor(p)? + FACTOR_SLACK >= required {
            return Ok(Some(p));
        }
    }
    Ok(None)
}

/// Idle fraction of a 1F1B pipeline flush.
pub fn bubble_ratio(pp: usize, microbatches: usize) -> Result<f64> {
    if pp == 0 || microbatches == 0 {
        return Err(invalid("pipeline depth and microbatch count must be positive"));
    }
    Ok((pp - 1) as f64 / (microbatches + pp - 1) as f64)
}

/// Multiplier on cross-stage activation transfer time when a stage runs on
/// `n2` instead of `n1` GPUs.
pub fn pp_transfer_scaling(n1: usize, n2: usize) -> Result<f64> {
    if n2 == 0 || n2 > n1 {
        return Err(invalid(format!("reduced degree {n2} must be in 1..={n1}")));
    }
    Ok(n1 as f64 / n2 as f64)
}

/// Relative iteration time of one replica, normalized so the healthy
/// configuration takes exactly 1.
///
/// With `r = tp / reduced_tp` and `s` the pipeline schedule length relative
/// to the healthy local batch, the components are compute `c * s * r / perf`,
/// exposed DP allreduce `d * r`, exposed cross-stage transfer
/// `(1 - c - d - f) * s * r`, and TP collectives `f * s * ring`, where
/// `ring` is the ring-allreduce volume factor of the reduced group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IterTimeModel {
    pub tp: usize,
    pub pp: usize,
    pub local_batch: usize,
    pub compute: f64,
    pub dp_exposed: f64,
    pub tp_comm: f64,
    /// Load of the busiest rank from uneven attention-head splits; applied
    /// to the compute term only when set.
    pub apply_head_imbalance: bool,
    pub heads: usize,
    pub power: PowerCurve,
}

impl Default for IterTimeModel {
    fn default() -> Self {
        Self {
            tp: 32,
            pp: 8,
            local_batch: 8,
            compute: 0.894_248,
            dp_exposed: 0.083_696,
            tp_comm: 0.0,
            apply_head_imbalance: false,
            heads: 128,
            power: PowerCurve::default(),
        }
    }
}

impl IterTimeModel {
    pub fn pp_exposed(&self) -> f64 {
        1.0 - self.compute - self.dp_exposed - self.tp_comm
    }

    fn schedule(&self, local_batch: usize) -> f64 {
        (local_batch + self.pp - 1) as f64 / (self.local_batch + self.pp - 1) as f64
    }

    fn ring(&self, reduced_tp: usize) -> f64 {
        let f = |n: usize| if n <= 1 { 0.0 } else { (n - 1) as f64 / n as f64 };
        if self.tp <= 1 {
            1.0
        } else {
            f(reduced_tp) / f(self.tp)
        }
    }

    pub fn head_imbalance(&self, reduced_tp: usize) -> f64 {
        if !self.apply_head_imbalance || reduced_tp > self.heads {
            return 1.0;
        }
        let per_rank = self.heads.div_ceil(reduced_tp) as f64;
        let base = self.heads.div_ceil(self.tp) as f64;
        (per_rank / base) / (self.tp as f64 / reduced_tp as f64)
    }

    /// Decomposition `t = base + compute * kc + dp_exposed * kd` with
    /// `tp_comm` held fixed; the calibration is linear in the two weights.
    fn basis(&self, reduced_tp: usize, local_batch: usize, power: f64) -> Result<(f64, f64, f64)> {
        if reduced_tp == 0 || reduced_tp > self.tp {
            return Err(invalid(format!("reduced TP {reduced_tp} must be in 1..={}", self.tp)));
        }
        if local_batch == 0 {
            return Err(invalid("local batch must be positive"));
        }
        let r = self.tp as f64 / reduced_tp as f64;
        let s = self.schedule(local_batch);
        let perf = self.power.perf_factor(power)?;
        let imb = self.head_imbalance(reduced_tp);
        let pp_part = s * r;
        let base = pp_part * (1.0 - self.tp_comm) + self.tp_comm * s * self.ring(reduced_tp);
        let kc = s * r * imb / perf - pp_part;
        let kd = r - pp_part;
        Ok((base, kc, kd))
    }

    pub fn replica_iter_time(&self, reduced_tp: usize, local_batch: usize, power: f64) -> Result<f64> {
        let (base, kc, kd) = self.basis(reduced_tp, local_batch, power)?;
        Ok(base + self.compute * kc + self.dp_exposed * kd)
    }

    /// Least-squares fit of the compute and DP-exposed weights to observed
    /// `(reduced_tp, local_batch, power, rel_iter_time)` rows.
    pub fn calibrate(&self, rows: &[OperatingPoint]) -> Result<Self> {
        let (mut scc, mut scd, mut sdd, mut sc, mut sd) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for row in rows {
            let (base, kc, kd) = self.basis(row.tp, row.local_batch, row.power)?;
            let y = row.rel_iter_time - base;
            scc += kc * kc;
            scd += kc * kd;
            sdd += kd * kd;
            sc += kc * y;
            sd += kd * y;
        }
        let det = scc * sdd - scd * scd;
        if det.abs() < 1e-18 {
            return Err(invalid("calibration rows do not determine both coefficients"));
        }
        let compute = (sc * sdd - sd * scd) / det;
        let dp_exposed = (scc * sd - scd * sc) / det;
        let fitted = Self { compute, dp_exposed, ..self.clone() };
        if fitted.pp_exposed() < 0.0 || compute < 0.0 || dp_exposed < 0.0 {
            return Err(Error::Infeasible(format!(
                "fit gives negative component weights (compute {compute:.4}, dp {dp_exposed:.4})"
            )));
        }
        Ok(fitted)
    }
}

/// One row of a reduced-TP operating table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatingPoint {
    pub tp: usize,
    pub local_batch: usize,
    pub power: f64,
    pub rel_iter_time: f64,
}

/// Dimensions that determine reshard traffic and backward compute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub hidden: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub bytes_per_param: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CommCompRatio {
    /// Largest per-GPU reshard volume, summed over one layer's MLP and
    /// attention blocks.
    pub max_bytes_per_gpu: f64,
    /// One layer's backward FLOPs per GPU for a single sequence.
    pub backward_flops_per_gpu: f64,
    pub ratio: f64,
}

/// Communication-to-computation ratio of the pre-sync reshard on a healthy
/// replica of degree `n1` paired with one of degree `n2`.
pub fn comm_comp_ratio(dims: &ModelDims, n1: usize, n2: usize) -> Result<CommCompRatio> {
    if dims.hidden == 0 || dims.seq_len == 0 || dims.heads == 0 || dims.hidden % dims.heads != 0 {
        return Err(invalid("model dims must be positive with hidden divisible by heads"));
    }
    let h = dims.hidden as f64;
    let head_dim = (dims.hidden / dims.heads) as f64;
    let bytes = dims.bytes_per_param as f64;
    let peak = |k: usize| -> Result<f64> {
        let stats = build_reshard_plan(&build_shard_map(k, n1, n2)?, ReshardDirection::PreSync).stats(n1);
        Ok(stats.max_sent.max(stats.max_received) as f64)
    };
    // an MLP column is one column of A and one row of B; a head is its
    // four projection matrices
    let mlp = peak(4 * dims.hidden)? * 2.0 * h * bytes;
    let attn = peak(dims.heads)? * 4.0 * h * head_dim * bytes;
    let s = dims.seq_len as f64;
    let forward = 24.0 * s * h * h + 4.0 * s * s * h;
    let backward = 2.0 * forward / n1 as f64;
    let max_bytes = mlp + attn;
    Ok(CommCompRatio { max_bytes_per_gpu: max_bytes, backward_flops_per_gpu: backward, ratio: max_bytes / backward })
}

/// Linear fit of final-backward-pass slowdown against the
/// communication-to-computation ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlowdownFit {
    pub slope: f64,
    pub intercept: f64,
    pub max_slowdown: f64,
}

impl Default for SlowdownFit {
    fn default() -> Self {
        Self { slope: prototype_slope(0.04).unwrap_or(0.0), intercept: 0.0, max_slowdown: 1.04 }
    }
}

pub fn backward_slowdown(ratio: f64, fit: &SlowdownFit) -> Result<f64> {
    if !(ratio >= 0.0) {
        return Err(invalid(format!("comm/comp ratio {ratio} must be >= 0")));
    }
    Ok((1.0 + fit.slope * ratio + fit.intercept).min(fit.max_slowdown))
}

/// Workloads of the small-scale prototype: two hidden sizes with head
/// dimension 128, three sequence lengths, TP8 paired with every smaller
/// degree down to 2.
pub fn prototype_grid() -> Vec<(ModelDims, usize, usize)> {
    let mut grid = Vec::new();
    for hidden in [6144, 12288] {
        for seq_len in [4096, 8192, 16384] {
            for n2 in 2..8 {
                grid.push((ModelDims { hidden, seq_len, heads: hidden / 128, bytes_per_param: 2 }, 8, n2));
            }
        }
    }
    grid
}

/// Slope that maps the largest prototype ratio to `max_extra` slowdown.
pub fn prototype_slope(max_extra: f64) -> Result<f64> {
    let max = prototype_grid()
        .iter()
        .map(|(d, n1, n2)| comm_comp_ratio(d, *n1, *n2).map(|c| c.ratio))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(max_extra / max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perf_factor_anchors() {
        let c = PowerCurve::default();
        assert_eq!(c.perf_factor(1.0).unwrap(), 1.0);
        assert!((c.perf_factor(1.1).unwrap() - 1.0692).abs() < 1e-12);
        assert!((c.perf_factor(1.2).unwrap() - 1.122).abs() < 1e-12);
        assert!((c.perf_per_watt(1.3).unwrap() - 0.898).abs() < 1e-12);
        assert!(c.perf_factor(1.31).is_err());
        assert!(c.perf_factor(0.99).is_err());
    }

    #[test]
    fn boost_levels() {
        let c = PowerCurve::default();
        assert_eq!(min_boost_power(&c, &POWER_GRID, 32, 30, 1.0).unwrap(), Some(1.15));
        assert_eq!(min_boost_power(&c, &POWER_GRID, 32, 28, 1.0).unwrap(), Some(1.3));
        assert_eq!(min_boost_power(&c, &POWER_GRID, 32, 24, 1.0).unwrap(), None);
        assert_eq!(min_boost_power(&c, &POWER_GRID, 32, 32, 1.0).unwrap(), Some(1.0));
        assert!((work_ratio(8, 7, 1.0) - 1.142_857).abs() < 1e-6);
    }

    #[test]
    fn bubble_ratio_closed_form() {
        assert_eq!(bubble_ratio(1, 5).unwrap(), 0.0);
        assert!((bubble_ratio(8, 8).unwrap() - 7.0 / 15.0).abs() < 1e-15);
        assert!(bubble_ratio(0, 1).is_err());
    }

    #[test]
    fn transfer_scaling() {
        assert_eq!(pp_transfer_scaling(32, 32).unwrap(), 1.0);
        assert!((pp_transfer_scaling(32, 30).unwrap() - 16.0 / 15.0).abs() < 1e-15);
        assert!((pp_transfer_scaling(32, 28).unwrap() - 8.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn healthy_iteration_is_unit() {
        let m = IterTimeModel::default();
        assert!((m.replica_iter_time(32, 8, 1.0).unwrap() - 1.0).abs() < 1e-15);
        let m = IterTimeModel { tp_comm: 0.01, ..m };
        assert!((m.replica_iter_time(32, 8, 1.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn slowdown_is_clamped_and_rejects_negative() {
        let fit = SlowdownFit { slope: 2.0, intercept: 0.0, max_slowdown: 1.04 };
        assert_eq!(backward_slowdown(0.0, &fit).unwrap(), 1.0);
        assert_eq!(backward_slowdown(1.0, &fit).unwrap(), 1.04);
        assert!(backward_slowdown(-0.1, &fit).is_err());
    }
}
