//! JSON scenario files: one experiment plus the model coefficients it runs
//! with, and where each configured value comes from.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{invalid, Error, Result};
use crate::failure::{ensemble_stats, generate_trace, Cluster, FailureModelConfig, Replay};
use crate::perfmodel::{IterTimeModel, POWER_GRID};
use crate::policy::{Policy, ReducedTpTable};
use crate::simulator::{blast_radius_sweep, fraction_sweep, monte_carlo_availability, run, spares_sweep, SimConfig, SnapshotConfig, SweepPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// Read off a published figure or table.
    Published,
    /// Fit by one of the calibration procedures.
    Calibrated,
    /// A modeling choice.
    Assumed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub source: Source,
    #[serde(default)]
    pub note: String,
}

/// Rebuilds the reduced-TP table from the iteration-time model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerivedTable {
    pub ladder: Vec<usize>,
    #[serde(default = "default_grid")]
    pub power_grid: Vec<f64>,
    pub slack: f64,
}

fn default_grid() -> Vec<f64> {
    POWER_GRID.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    #[serde(default)]
    pub iter_time: IterTimeModel,
    /// When set, replaces the table of the experiment.
    #[serde(default)]
    pub derive_table: Option<DerivedTable>,
}

impl ModelBlock {
    pub fn table(&self) -> Result<Option<ReducedTpTable>> {
        self.derive_table
            .as_ref()
            .map(|d| ReducedTpTable::derived(&self.iter_time, &d.ladder, &d.power_grid, d.slack))
            .transpose()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceCase {
    pub label: String,
    pub failure: FailureModelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Experiment {
    /// DP-DROP availability against failed fraction for several TP sizes.
    Availability { total_gpus: usize, tps: Vec<usize>, fractions: Vec<f64>, samples: usize, seed: u64 },
    /// Failure-trace occupancy and peaks for several failure models.
    TraceStats {
        cluster: Cluster,
        cases: Vec<TraceCase>,
        duration_days: f64,
        threshold: f64,
        seeds: usize,
        seed: u64,
        /// Labels `[numerator, denominator]` of the peak ratio to report.
        #[serde(default)]
        peak_ratio: Option<[String; 2]>,
    },
    FractionSweep { snapshot: SnapshotConfig, fractions: Vec<f64> },
    SparesSweep { sim: SimConfig, policies: Vec<Policy>, spare_counts: Vec<usize>, seeds: usize, max_spares: usize },
    BlastRadius { snapshot: SnapshotConfig, event_fraction: f64, radii: Vec<usize> },
    /// A single simulated trace.
    Trace { sim: SimConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// JSON pointers into this document mapped to the origin of the value.
    #[serde(default)]
    pub provenance: BTreeMap<String, Provenance>,
    #[serde(default)]
    pub model: Option<ModelBlock>,
    pub experiment: Experiment,
}

/// Named output files plus the aggregate summary.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOutput {
    pub files: Vec<(String, Vec<u8>)>,
    pub summary: Value,
}

impl ScenarioFile {
    /// Parses and validates a scenario; nothing runs here.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Value = serde_json::from_str(text)?;
        let scenario: ScenarioFile = serde_json::from_value(raw.clone()).map_err(|e| Error::Schema(e.to_string()))?;
        for key in scenario.provenance.keys() {
            if raw.pointer(key).is_none() {
                return Err(Error::Schema(format!("provenance key {key:?} does not point at a value")));
            }
        }
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Schema("scenario name is empty".into()));
        }
        if let Some(m) = &self.model {
            m.iter_time.power.validate()?;
            m.table()?;
        }
        match &self.experiment {
            Experiment::Availability { tps, fractions, samples, .. } => {
                if tps.is_empty() || fractions.is_empty() || *samples == 0 {
                    return Err(invalid("availability needs TP sizes, fractions and samples"));
                }
            }
            Experiment::TraceStats { cluster, cases, duration_days, seeds, peak_ratio, .. } => {
                cluster.validate()?;
                if cases.is_empty() || *seeds == 0 || !(*duration_days > 0.0) {
                    return Err(invalid("trace_stats needs cases, seeds and a positive duration"));
                }
                for c in cases {
                    c.failure.validate(cluster)?;
                }
                if let Some(pair) = peak_ratio {
                    for l in pair {
                        if !cases.iter().any(|c| &c.label == l) {
                            return Err(invalid(format!("peak_ratio label {l:?} names no case")));
                        }
                    }
                }
            }
            Experiment::FractionSweep { snapshot, fractions } => {
                self.snapshot(snapshot)?;
                if fractions.is_empty() {
                    return Err(invalid("fraction_sweep needs fractions"));
                }
            }
            Experiment::BlastRadius { snapshot, radii, .. } => {
                self.snapshot(snapshot)?;
                if radii.is_empty() {
                    return Err(invalid("blast_radius needs radii"));
                }
            }
            Experiment::SparesSweep { sim, policies, spare_counts, seeds, .. } => {
                self.sim(sim)?.validate()?;
                if policies.is_empty() || spare_counts.is_empty() || *seeds == 0 {
                    return Err(invalid("spares_sweep needs policies, spare counts and seeds"));
                }
            }
            Experiment::Trace { sim } => self.sim(sim)?.validate()?,
        }
        Ok(())
    }

    /// Replaces every seed in the experiment.
    pub fn with_seed(mut self, seed: u64) -> Self {
        match &mut self.experiment {
            Experiment::Availability { seed: s, .. } | Experiment::TraceStats { seed: s, .. } => *s = seed,
            Experiment::FractionSweep { snapshot, .. } | Experiment::BlastRadius { snapshot, .. } => snapshot.seed = seed,
            Experiment::SparesSweep { sim, .. } | Experiment::Trace { sim } => sim.seed = seed,
        }
        self
    }

    fn derived_table(&self) -> Result<Option<ReducedTpTable>> {
        self.model.as_ref().map_or(Ok(None), ModelBlock::table)
    }

    fn sim(&self, sim: &SimConfig) -> Result<SimConfig> {
        let mut s = sim.clone();
        if let Some(t) = self.derived_table()? {
            s.table = t;
        }
        Ok(s)
    }

    fn snapshot(&self, snap: &SnapshotConfig) -> Result<SnapshotConfig> {
        let mut s = snap.clone();
        if let Some(t) = self.derived_table()? {
            s.table = t;
        }
        s.cluster.validate()?;
        s.parallel.validate(&s.cluster)?;
        s.table.validate()?;
        Ok(s)
    }

    pub fn run(&self) -> Result<ScenarioOutput> {
        self.validate()?;
        let (files, detail) = match &self.experiment {
            Experiment::Availability { total_gpus, tps, fractions, samples, seed } => {
                let pts = monte_carlo_availability(*total_gpus, tps, fractions, *samples, *seed)?;
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(["tp", "failed_fraction", "failed_gpus", "median_available", "mean_lost", "max_lost"])?;
                for p in &pts {
                    w.serialize((p.tp, p.failed_fraction, p.failed_gpus, 1.0 - p.lost.median, p.lost.mean, p.lost.max))?;
                }
                (vec![("availability.csv".to_string(), finish(w)?)], json!({ "points": pts }))
            }
            Experiment::TraceStats { cluster, cases, duration_days, threshold, seeds, seed, peak_ratio } => {
                trace_stats_output(cluster, cases, *duration_days, *threshold, *seeds, *seed, peak_ratio.as_ref())?
            }
            Experiment::FractionSweep { snapshot, fractions } => {
                let pts = fraction_sweep(&self.snapshot(snapshot)?, fractions)?;
                (vec![("fraction_sweep.csv".to_string(), sweep_csv(&pts)?)], json!({ "points": pts }))
            }
            Experiment::BlastRadius { snapshot, event_fraction, radii } => {
                let pts = blast_radius_sweep(&self.snapshot(snapshot)?, *event_fraction, radii)?;
                (vec![("blast_radius.csv".to_string(), sweep_csv(&pts)?)], json!({ "points": pts }))
            }
            Experiment::SparesSweep { sim, policies, spare_counts, seeds, max_spares } => {
                let out = spares_sweep(&self.sim(sim)?, policies, spare_counts, *seeds, *max_spares)?;
                let mut w = csv::Writer::from_writer(Vec::new());
                for p in &out.points {
                    w.serialize(p)?;
                }
                let mut r = csv::Writer::from_writer(Vec::new());
                r.write_record(["policy", "required_spare_domains"])?;
                for q in &out.requirements {
                    r.write_record([q.policy.as_str().to_string(), q.required.map_or("none".into(), |v| v.to_string())])?;
                }
                (
                    vec![("spares_sweep.csv".to_string(), finish(w)?), ("spares_required.csv".to_string(), finish(r)?)],
                    json!({ "points": out.points, "requirements": out.requirements }),
                )
            }
            Experiment::Trace { sim } => {
                let report = run(&self.sim(sim)?)?;
                let mut buf = Vec::new();
                report.write_csv(&mut buf)?;
                (vec![("series.csv".to_string(), buf)], json!({ "summary": report.summary }))
            }
        };
        let mut summary = json!({ "scenario": self.name });
        if let (Value::Object(s), Value::Object(d)) = (&mut summary, detail) {
            s.extend(d);
        }
        let mut files = files;
        files.push(("summary.json".to_string(), serde_json::to_vec_pretty(&summary)?));
        Ok(ScenarioOutput { files, summary })
    }
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn sweep_csv(pts: &[SweepPoint]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["failed_fraction", "blast_radius", "policy", "mean_loss", "median_loss", "min_loss", "max_loss"])?;
    for p in pts {
        for l in &p.losses {
            w.serialize((p.failed_fraction, p.blast_radius, l.policy.as_str(), l.loss.mean, l.loss.median, l.loss.min, l.loss.max))?;
        }
    }
    finish(w)
}

fn trace_stats_output(
    cluster: &Cluster,
    cases: &[TraceCase],
    duration: f64,
    threshold: f64,
    seeds: usize,
    seed: u64,
    peak_ratio: Option<&[String; 2]>,
) -> Result<(Vec<(String, Vec<u8>)>, Value)> {
    let mut stats = csv::Writer::from_writer(Vec::new());
    stats.write_record(["case", "seed_index", "occupancy_above", "peak_failed", "peak_unhealthy_domains", "mean_failed"])?;
    let mut series = csv::Writer::from_writer(Vec::new());
    series.write_record(["case", "t_days", "failed_gpus", "failed_fraction"])?;
    let mut per_case = BTreeMap::new();
    for c in cases {
        let s = ensemble_stats(cluster, &c.failure, duration, threshold, seeds, seed)?;
        for (i, st) in s.iter().enumerate() {
            stats.serialize((&c.label, i, st.occupancy_above, st.peak_failed, st.peak_unhealthy_domains, st.mean_failed))?;
        }
        let n = s.len() as f64;
        per_case.insert(
            c.label.clone(),
            json!({
                "mean_occupancy_above": s.iter().map(|x| x.occupancy_above).sum::<f64>() / n,
                "mean_peak_failed": s.iter().map(|x| x.peak_failed as f64).sum::<f64>() / n,
                "max_peak_unhealthy_domains": s.iter().map(|x| x.peak_unhealthy_domains).max(),
            }),
        );
        // failed-GPU time series of the first seed of each case
        let trace = generate_trace(cluster, &c.failure, duration, crate::failure::derive_seed(seed, 0))?;
        let mut replay = Replay::new(&trace);
        loop {
            let st = replay.state();
            series.serialize((&c.label, replay.time(), st.failed_count(), st.failed_fraction()))?;
            if replay.advance().is_none() {
                break;
            }
        }
    }
    let mut summary = json!({ "cases": per_case });
    if let Some([num, den]) = peak_ratio {
        let peak = |l: &String| per_case[l]["mean_peak_failed"].as_f64().unwrap_or(f64::NAN);
        summary["peak_ratio"] = json!({ "numerator": num, "denominator": den, "ratio": peak(num) / peak(den) });
    }
    Ok((vec![("trace_stats.csv".to_string(), finish(stats)?), ("failed_series.csv".to_string(), finish(series)?)], summary))
}
