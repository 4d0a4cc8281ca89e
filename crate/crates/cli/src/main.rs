use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use ntp_core::failure::{calibrate_rate, Cluster, FailureModelConfig, OccupancyTarget};
use ntp_core::perfmodel::IterTimeModel;
use ntp_core::policy::ReducedTpTable;
use ntp_core::scenario::{Experiment, ScenarioFile};
use ntp_core::shardmap::{build_reshard_plan, build_shard_map, naive_contiguous_sync_volumes, ReshardDirection};
use ntp_core::verify::{run_tp_numerics, VerifyConfig};

#[derive(Parser)]
#[command(name = "ntpsim", version, about = "Nonuniform tensor parallelism: shard maps, numerics checks and failure simulation")]
struct Cli {
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Shard map and reshard plan statistics for k columns on n1 and n2 ranks.
    Shardmap {
        #[arg(long)]
        k: usize,
        #[arg(long)]
        n1: usize,
        #[arg(long)]
        n2: usize,
        /// Include per-column owners and every transfer.
        #[arg(long)]
        full: bool,
    },
    /// Run the tensor-parallel numerics oracles.
    Verify {
        #[arg(long, value_enum, default_value_t = Suite::TpNumerics)]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        sync_cases: Option<usize>,
        #[arg(long)]
        fd_cases: Option<usize>,
        /// GeLU cubic coefficient of the scalar reference.
        #[arg(long, hide = true)]
        gelu_coeff: Option<f64>,
    },
    /// Run a scenario file and write its CSV and JSON outputs.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, env = "NTPSIM_OUT_DIR", default_value = "out")]
        out: PathBuf,
        /// Override every seed in the scenario.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit model coefficients and write them as a JSON file.
    Calibrate {
        #[arg(long, value_enum)]
        target: Target,
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, env = "NTPSIM_OUT_DIR", default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fraction of time the failed fraction should exceed the threshold.
        #[arg(long)]
        occupancy: Option<f64>,
        #[arg(long)]
        threshold: Option<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    TpNumerics,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Target {
    TraceStats,
    Table1,
}

enum Failure {
    /// Exit 1: a check or calibration did not succeed.
    Check(String),
    /// Exit 1, with the details already on stdout.
    Reported(String),
    /// Exit 2: bad arguments, schema or configuration.
    Usage(String),
}

impl From<ntp_core::Error> for Failure {
    fn from(e: ntp_core::Error) -> Self {
        match e {
            ntp_core::Error::NonConvergence { .. } => Failure::Check(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let json = cli.json;
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            report_error(json, &msg);
            ExitCode::from(1)
        }
        Err(Failure::Reported(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            report_error(json, &msg);
            ExitCode::from(2)
        }
    }
}

fn report_error(json: bool, msg: &str) {
    if json {
        println!("{}", json!({ "error": msg }));
    }
    eprintln!("error: {msg}");
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Shardmap { k, n1, n2, full } => shardmap(cli.json, k, n1, n2, full),
        Command::Verify { suite: Suite::TpNumerics, seed, sync_cases, fd_cases, gelu_coeff } => {
            let mut cfg = VerifyConfig { seed, ..VerifyConfig::default() };
            cfg.sync_cases = sync_cases.unwrap_or(cfg.sync_cases);
            cfg.fd_cases = fd_cases.unwrap_or(cfg.fd_cases);
            cfg.reference_gelu_cubic = gelu_coeff.unwrap_or(cfg.reference_gelu_cubic);
            verify(cli.json, &cfg)
        }
        Command::Simulate { scenario, out, seed } => simulate(cli.json, &scenario, &out, seed),
        Command::Calibrate { target, scenario, out, seed, occupancy, threshold } => {
            let scenario = scenario.map(|p| load(&p)).transpose()?;
            match target {
                Target::Table1 => calibrate_table1(cli.json, scenario.as_ref(), &out),
                Target::TraceStats => calibrate_trace(cli.json, scenario.as_ref(), &out, seed, occupancy, threshold),
            }
        }
    }
}

fn print_json(v: &Value) -> Result<(), Failure> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn shardmap(as_json: bool, k: usize, n1: usize, n2: usize, full: bool) -> Result<(), Failure> {
    let map = build_shard_map(k, n1, n2)?;
    let pre = build_reshard_plan(&map, ReshardDirection::PreSync);
    let post = build_reshard_plan(&map, ReshardDirection::PostSync);
    let (pre_stats, post_stats) = (pre.stats(n1), post.stats(n1));
    let naive = naive_contiguous_sync_volumes(k, n1, n2)?;
    let naive_sizes: Vec<Vec<usize>> = naive.iter().map(|v| v.iter().map(|o| o.columns).collect()).collect();
    let comp_sizes: Vec<usize> = map.comp_columns().iter().map(Vec::len).collect();
    let sync_sizes: Vec<usize> = map.sync_columns().iter().map(Vec::len).collect();
    if as_json {
        let mut v = json!({
            "k": k, "n1": n1, "n2": n2,
            "identity": map.is_identity(),
            "retained_columns": map.retained(),
            "comp_shard_sizes": comp_sizes,
            "sync_shard_sizes": sync_sizes,
            "pre_sync": pre_stats,
            "post_sync": post_stats,
            "naive_sub_shards": naive_sizes,
        });
        if full {
            v["map"] = serde_json::to_value(&map)?;
            v["pre_sync_plan"] = serde_json::to_value(&pre)?;
            v["post_sync_plan"] = serde_json::to_value(&post)?;
        }
        return print_json(&v);
    }
    println!("shard map k={k} n1={n1} n2={n2}");
    if map.is_identity() {
        println!("identity map: comp and sync layouts coincide, plan is empty");
        return Ok(());
    }
    println!("retained columns:           {}", map.retained());
    println!("offload ranks:              {}..{}", n2, n1);
    println!("columns moved:              {}", pre_stats.total_moved);
    println!("transfers per direction:    {}", pre.transfers.len());
    println!("pre-sync  max sent/recv:    {} / {}", pre_stats.max_sent, pre_stats.max_received);
    println!("post-sync max sent/recv:    {} / {}", post_stats.max_sent, post_stats.max_received);
    let widest = naive_sizes.iter().map(|v| v.len()).max().unwrap_or(0);
    println!("naive contiguous sub-shards per reduced rank: up to {widest}, e.g. {:?}", naive_sizes.first().unwrap_or(&vec![]));
    if full {
        for t in &pre.transfers {
            println!("  {} -> {}: {} columns", t.src, t.dst, t.cols.len());
        }
    }
    Ok(())
}

fn verify(as_json: bool, cfg: &VerifyConfig) -> Result<(), Failure> {
    let report = run_tp_numerics(cfg)?;
    let failed: Vec<_> = report.failures().collect();
    let summary = format!("{} of {} numerics cases failed", failed.len(), report.cases.len());
    if as_json {
        let mut doc = json!({
            "seed": report.seed,
            "passed": report.passed(),
            "cases": report.cases.len(),
            "failures": failed,
        });
        if !failed.is_empty() {
            doc["error"] = json!(summary);
        }
        print_json(&doc)?;
    } else {
        let mut suites: Vec<&str> = report.cases.iter().map(|c| c.suite).collect();
        suites.dedup();
        for s in suites {
            let (n, ok) = report.cases.iter().filter(|c| c.suite == s).fold((0, 0), |(n, ok), c| (n + 1, ok + c.passed as usize));
            println!("{:<5} {s}: {ok}/{n}", if ok == n { "PASS" } else { "FAIL" });
        }
        for f in &failed {
            println!("{}", serde_json::to_string(f)?);
        }
    }
    match (failed.is_empty(), as_json) {
        (true, _) => Ok(()),
        (false, true) => Err(Failure::Reported(summary)),
        (false, false) => Err(Failure::Check(summary)),
    }
}

fn load(path: &Path) -> Result<ScenarioFile, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    ScenarioFile::from_json(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn simulate(as_json: bool, path: &Path, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let mut scenario = load(path)?;
    if let Some(s) = seed {
        scenario = scenario.with_seed(s);
    }
    let output = scenario.run()?;
    let dir = out.join(&scenario.name);
    fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    for (name, bytes) in &output.files {
        let p = dir.join(name);
        fs::write(&p, bytes)?;
        written.push(p.display().to_string());
    }
    if as_json {
        return print_json(&json!({ "files": written, "summary": output.summary }));
    }
    for w in &written {
        println!("wrote {w}");
    }
    print_summary(&scenario.experiment, &output.summary);
    Ok(())
}

fn f(v: &Value) -> f64 {
    v.as_f64().unwrap_or(f64::NAN)
}

fn print_summary(exp: &Experiment, s: &Value) {
    let empty = Vec::new();
    let points = s["points"].as_array().unwrap_or(&empty);
    match exp {
        Experiment::Availability { .. } => {
            println!("{:>4} {:>9} {:>10} {:>9}", "tp", "failed", "median_av", "max_lost");
            for p in points {
                println!("{:>4} {:>9.5} {:>10.4} {:>9.4}", p["tp"].to_string(), f(&p["failed_fraction"]), 1.0 - f(&p["lost"]["median"]), f(&p["lost"]["max"]));
            }
        }
        Experiment::FractionSweep { .. } | Experiment::BlastRadius { .. } => {
            println!("{:>9} {:>6}  mean loss per policy", "fraction", "radius");
            for p in points {
                let losses: Vec<String> = p["losses"]
                    .as_array()
                    .unwrap_or(&empty)
                    .iter()
                    .map(|l| format!("{}={:.4}", l["policy"].as_str().unwrap_or("?"), f(&l["loss"]["mean"])))
                    .collect();
                println!("{:>9.5} {:>6}  {}", f(&p["failed_fraction"]), p["blast_radius"].to_string(), losses.join("  "));
            }
        }
        Experiment::SparesSweep { .. } => {
            for r in s["requirements"].as_array().unwrap_or(&empty) {
                println!("{:<8} required spare domains: {}", r["policy"].as_str().unwrap_or("?"), r["required"]);
            }
            for p in points {
                println!(
                    "{:<8} spares {:>4}  per-GPU throughput {:.4}  paused {:.4}",
                    p["policy"].as_str().unwrap_or("?"),
                    p["spare_domains"].to_string(),
                    f(&p["throughput_per_gpu"]),
                    f(&p["pause_fraction"])
                );
            }
        }
        Experiment::TraceStats { .. } => {
            if let Some(cases) = s["cases"].as_object() {
                for (label, c) in cases {
                    println!(
                        "{label:<8} occupancy {:.4}  mean peak {:.2}  max unhealthy domains {}",
                        f(&c["mean_occupancy_above"]),
                        f(&c["mean_peak_failed"]),
                        c["max_peak_unhealthy_domains"]
                    );
                }
            }
            if !s["peak_ratio"].is_null() {
                let r = &s["peak_ratio"];
                println!("peak ratio {} / {} = {:.3}", r["numerator"].as_str().unwrap_or("?"), r["denominator"].as_str().unwrap_or("?"), f(&r["ratio"]));
            }
        }
        Experiment::Trace { .. } => {
            if let Some(m) = s["summary"].as_object() {
                for (k, v) in m {
                    println!("{k:<24} {v}");
                }
            }
        }
    }
}

fn write_file(out: &Path, name: &str, v: &Value) -> Result<String, Failure> {
    fs::create_dir_all(out)?;
    let p = out.join(name);
    fs::write(&p, serde_json::to_vec_pretty(v)?)?;
    Ok(p.display().to_string())
}

fn calibrate_table1(as_json: bool, scenario: Option<&ScenarioFile>, out: &Path) -> Result<(), Failure> {
    let start = scenario.and_then(|s| s.model.as_ref()).map(|m| m.iter_time.clone()).unwrap_or_else(IterTimeModel::default);
    let points = ReducedTpTable::published().operating_points();
    let fit = start.calibrate(&points)?;
    let mut residuals = Vec::new();
    for p in &points {
        let got = fit.replica_iter_time(p.tp, p.local_batch, p.power)?;
        residuals.push(json!({ "tp": p.tp, "local_batch": p.local_batch, "power": p.power, "target": p.rel_iter_time, "fitted": got, "residual": got - p.rel_iter_time }));
    }
    let max_residual = residuals.iter().map(|r| f(&r["residual"]).abs()).fold(0.0, f64::max);
    let note = "least squares over the five reduced-TP operating points";
    let doc = json!({
        "model": { "iter_time": fit },
        "provenance": {
            "/model/iter_time/compute": { "source": "calibrated", "note": note },
            "/model/iter_time/dp_exposed": { "source": "calibrated", "note": note },
        },
        "residuals": residuals,
        "max_abs_residual": max_residual,
    });
    let path = write_file(out, "table1_coefficients.json", &doc)?;
    if as_json {
        print_json(&json!({ "file": path, "calibration": doc }))?;
    } else {
        println!("wrote {path}");
        println!("compute {:.6}  dp_exposed {:.6}  max |residual| {:.5}", fit.compute, fit.dp_exposed, max_residual);
        for r in &residuals {
            println!("  TP{:<3} lb {} power {:<4}  target {:.3}  fitted {:.4}", r["tp"], r["local_batch"], f(&r["power"]), f(&r["target"]), f(&r["fitted"]));
        }
    }
    Ok(())
}

fn trace_setup(scenario: Option<&ScenarioFile>) -> (Cluster, FailureModelConfig, f64) {
    match scenario.map(|s| &s.experiment) {
        Some(Experiment::TraceStats { cluster, cases, duration_days, .. }) => (*cluster, cases[0].failure, *duration_days),
        Some(Experiment::Trace { sim } | Experiment::SparesSweep { sim, .. }) => (sim.cluster, sim.failure, sim.duration_days),
        _ => (Cluster::default(), FailureModelConfig::default(), OccupancyTarget::default().duration_days),
    }
}

fn calibrate_trace(
    as_json: bool,
    scenario: Option<&ScenarioFile>,
    out: &Path,
    seed: u64,
    occupancy: Option<f64>,
    threshold: Option<f64>,
) -> Result<(), Failure> {
    let (cluster, model, duration) = trace_setup(scenario);
    let mut target = OccupancyTarget { duration_days: duration, ..OccupancyTarget::default() };
    target.occupancy = occupancy.unwrap_or(target.occupancy);
    target.threshold = threshold.unwrap_or(target.threshold);
    let cal = calibrate_rate(&cluster, &model, &target, seed)?;
    let failure = FailureModelConfig { rate_per_gpu_day: cal.rate_per_gpu_day, ..model };
    let doc = json!({
        "cluster": cluster,
        "failure": failure,
        "target": target,
        "seed": seed,
        "achieved_occupancy": cal.achieved_occupancy,
        "iterations": cal.iterations,
        "provenance": {
            "/failure/rate_per_gpu_day": {
                "source": "calibrated",
                "note": format!("occupancy above {} failed reached {:.4} against {}", target.threshold, cal.achieved_occupancy, target.occupancy),
            },
        },
    });
    let path = write_file(out, "trace_rate.json", &doc)?;
    if as_json {
        print_json(&json!({ "file": path, "calibration": doc }))?;
    } else {
        println!("wrote {path}");
        println!(
            "rate {:.6e} per GPU-day  occupancy {:.4} (target {})  iterations {}",
            cal.rate_per_gpu_day, cal.achieved_occupancy, target.occupancy, cal.iterations
        );
    }
    Ok(())
}
