//! Runtime verification suites for the tensor-parallel numerics.
//!
//! Each case compares a library path against an independent reference and
//! records the observed error, the tolerance, and where the worst
//! disagreement occurred.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::error::Result;
use crate::shardmap::{build_shard_map, contiguous_ranges};
use crate::tpnumerics::{
    attention_forward_dense, attention_forward_tp, mlp_backward, mlp_forward_dense, mlp_forward_tp,
    nonuniform_grad_sync, AttentionLayer, AttentionReplica, DenseMatrix, MlpLayer, ReduceOp, TpReplica,
    GELU_CUBIC,
};

pub const TP_TOLERANCE: f64 = 1e-12;
pub const FD_STEP: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Cubic GeLU coefficient used by the scalar-loop reference. Anything
    /// other than [`GELU_CUBIC`] is a negative control and must fail.
    pub reference_gelu_cubic: f64,
    pub sync_cases: usize,
    pub fd_cases: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { seed: 0, reference_gelu_cubic: GELU_CUBIC, sync_cases: 100, fd_cases: 50 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseResult {
    pub suite: &'static str,
    pub case: String,
    pub passed: bool,
    pub error: f64,
    pub tolerance: f64,
    /// Case parameters and the location of the largest difference.
    pub detail: serde_json::Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub cases: Vec<CaseResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| !c.passed)
    }
}

fn record(
    suite: &'static str,
    case: String,
    got: &DenseMatrix<f64>,
    want: &DenseMatrix<f64>,
    tolerance: f64,
    params: serde_json::Value,
) -> Result<CaseResult> {
    let error = got.relative_error(want)?;
    let (row, col, abs) = got.max_abs_diff(want)?;
    Ok(CaseResult {
        suite,
        case,
        passed: error <= tolerance && got.is_finite(),
        error,
        tolerance,
        detail: json!({
            "params": params,
            "worst": { "row": row, "col": col, "abs_diff": abs, "got": got.get(row, col), "want": want.get(row, col) },
        }),
    })
}

/// Plain nested loops with the GeLU written out, sharing no code with the
/// matrix type.
fn scalar_loop_mlp(x: &DenseMatrix<f64>, layer: &MlpLayer<f64>, cubic: f64) -> DenseMatrix<f64> {
    let (n, h, f) = (x.rows(), layer.hidden(), layer.ffn());
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let mut y = vec![0.0; n * f];
    for i in 0..n {
        for j in 0..f {
            let mut s = 0.0;
            for p in 0..h {
                s += x.get(i, p) * layer.a.get(p, j);
            }
            y[i * f + j] = 0.5 * s * (1.0 + (c * (s + cubic * s * s * s)).tanh());
        }
    }
    DenseMatrix::from_fn(n, h, |i, o| (0..f).map(|j| y[i * f + j] * layer.b.get(j, o)).sum())
}

fn random_partition(k: usize, n: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..k).collect();
    perm.shuffle(rng);
    contiguous_ranges(k, n)
        .into_iter()
        .map(|r| {
            let mut cols = perm[r].to_vec();
            cols.sort_unstable();
            cols
        })
        .collect()
}

fn contiguous_layout(k: usize, n: usize) -> Vec<Vec<usize>> {
    contiguous_ranges(k, n).into_iter().map(|r| r.collect()).collect()
}

fn scalar_loop_suite(cfg: &VerifyConfig, rng: &mut ChaCha8Rng, out: &mut Vec<CaseResult>) -> Result<()> {
    for &(hidden, batch) in &[(4usize, 3usize), (8, 5)] {
        let layer = MlpLayer::<f64>::random(hidden, rng);
        let x = DenseMatrix::random(batch, hidden, 1.0, rng);
        let want = scalar_loop_mlp(&x, &layer, cfg.reference_gelu_cubic);
        let got = mlp_forward_dense(&x, &layer)?;
        out.push(record(
            "scalar-loop",
            format!("dense h={hidden} batch={batch}"),
            &got,
            &want,
            TP_TOLERANCE,
            json!({ "hidden": hidden, "ffn": 4 * hidden, "batch": batch, "gelu_cubic": cfg.reference_gelu_cubic }),
        )?);
    }
    Ok(())
}

fn permutation_suite(rng: &mut ChaCha8Rng, out: &mut Vec<CaseResult>) -> Result<()> {
    let hidden = 8;
    let layer = MlpLayer::<f64>::random(hidden, rng);
    let k = layer.ffn();
    let x = DenseMatrix::random(4, hidden, 1.0, rng);
    let dense = mlp_forward_dense(&x, &layer)?;

    let one = mlp_forward_tp(&x, &TpReplica::new(&layer, &[(0..k).collect()])?)?;
    out.push(CaseResult {
        suite: "permutation",
        case: "n=1 bitwise".into(),
        passed: one == dense,
        error: one.relative_error(&dense)?,
        tolerance: 0.0,
        detail: json!({ "hidden": hidden }),
    });

    let layouts = [
        ("n=4 contiguous", contiguous_layout(k, 4)),
        ("n=4 permuted", random_partition(k, 4, rng)),
        ("n=3 contiguous", contiguous_layout(k, 3)),
        ("n=7 permuted", random_partition(k, 7, rng)),
    ];
    for (name, layout) in layouts {
        let got = mlp_forward_tp(&x, &TpReplica::new(&layer, &layout)?)?;
        out.push(record("permutation", name.into(), &got, &dense, TP_TOLERANCE, json!({ "layout": layout }))?);
    }

    let attn = AttentionLayer::<f64>::random(hidden, 8, 4, rng);
    let xa = DenseMatrix::random(5, hidden, 1.0, rng);
    let dense_attn = attention_forward_dense(&xa, &attn)?;
    let head_layouts = [
        ("attention H=8 n=4", contiguous_layout(8, 4)),
        ("attention H=8 n=3", contiguous_layout(8, 3)),
        ("attention H=8 n=3 permuted", random_partition(8, 3, rng)),
    ];
    for (name, layout) in head_layouts {
        let got = attention_forward_tp(&xa, &AttentionReplica::new(&attn, &layout)?)?;
        out.push(record("permutation", name.into(), &got, &dense_attn, TP_TOLERANCE, json!({ "heads": layout }))?);
    }
    Ok(())
}

fn sync_suite(cfg: &VerifyConfig, rng: &mut ChaCha8Rng, out: &mut Vec<CaseResult>) -> Result<()> {
    for case in 0..cfg.sync_cases {
        let n1 = rng.random_range(1..=16usize);
        let n2 = rng.random_range(1..=n1);
        let k = rng.random_range(n1..=512usize);
        let hidden = rng.random_range(1..=6usize);
        let map = build_shard_map(k, n1, n2)?;
        let layer = MlpLayer::<f64>::random_with_ffn(hidden, k, rng);
        let mut healthy = TpReplica::new(&layer, &map.comp_columns())?;
        let mut reduced = TpReplica::new(&layer, &map.sync_columns())?;
        let (ha, hb) = (DenseMatrix::random(hidden, k, 1.0, rng), DenseMatrix::random(k, hidden, 1.0, rng));
        let (ra, rb) = (DenseMatrix::random(hidden, k, 1.0, rng), DenseMatrix::random(k, hidden, 1.0, rng));
        healthy.set_dense_grads(&ha, &hb)?;
        reduced.set_dense_grads(&ra, &rb)?;

        let synced = nonuniform_grad_sync(&healthy, &reduced, &map, ReduceOp::Sum)?;
        let (sum_a, sum_b) = (ha.add(&ra)?, hb.add(&rb)?);
        let params = json!({ "k": k, "n1": n1, "n2": n2, "hidden": hidden });
        let layouts_ok = synced.healthy.layout() == map.comp_columns() && synced.reduced.layout() == map.sync_columns();
        let want = DenseMatrix::vcat(&[&sum_a.transpose(), &sum_b])?;
        for (side, pair) in [("healthy", &synced.healthy), ("reduced", &synced.reduced)] {
            let (ga, gb) = pair.assemble();
            let got = DenseMatrix::vcat(&[&ga.transpose(), &gb])?;
            let mut r = record("sync", format!("#{case} {side} k={k} n1={n1} n2={n2}"), &got, &want, TP_TOLERANCE, params.clone())?;
            r.passed &= layouts_ok;
            out.push(r);
        }
    }
    Ok(())
}

/// Central finite differences of `L = sum(Z * G)` against the analytic
/// gradients.
fn fd_suite(cfg: &VerifyConfig, rng: &mut ChaCha8Rng, out: &mut Vec<CaseResult>) -> Result<()> {
    for case in 0..cfg.fd_cases {
        let hidden = rng.random_range(2..=4usize);
        let ffn = rng.random_range(2..=12usize);
        let batch = rng.random_range(1..=4usize);
        let layer = MlpLayer::<f64>::random_with_ffn(hidden, ffn, rng);
        let x = DenseMatrix::random(batch, hidden, 1.0, rng);
        let g = DenseMatrix::random(batch, hidden, 1.0, rng);
        let (ga, gb) = mlp_backward(&x, &layer.a, &layer.b, &g)?;

        let loss = |l: &MlpLayer<f64>| -> Result<f64> {
            let z = mlp_forward_dense(&x, l)?;
            Ok(z.hadamard(&g)?.as_slice().iter().sum())
        };
        let mut fd_a = DenseMatrix::zeros(hidden, ffn);
        let mut fd_b = DenseMatrix::zeros(ffn, hidden);
        for r in 0..hidden {
            for c in 0..ffn {
                let mut plus = layer.clone();
                let mut minus = layer.clone();
                plus.a.set(r, c, layer.a.get(r, c) + FD_STEP);
                minus.a.set(r, c, layer.a.get(r, c) - FD_STEP);
                fd_a.set(r, c, (loss(&plus)? - loss(&minus)?) / (2.0 * FD_STEP));
                let mut plus = layer.clone();
                let mut minus = layer.clone();
                plus.b.set(c, r, layer.b.get(c, r) + FD_STEP);
                minus.b.set(c, r, layer.b.get(c, r) - FD_STEP);
                fd_b.set(c, r, (loss(&plus)? - loss(&minus)?) / (2.0 * FD_STEP));
            }
        }
        let got = DenseMatrix::vcat(&[&ga.transpose(), &gb])?;
        let want = DenseMatrix::vcat(&[&fd_a.transpose(), &fd_b])?;
        out.push(record(
            "finite-difference",
            format!("#{case} h={hidden} ffn={ffn} batch={batch}"),
            &got,
            &want,
            FD_TOLERANCE,
            json!({ "hidden": hidden, "ffn": ffn, "batch": batch }),
        )?);
    }
    Ok(())
}

/// Runs every tp-numerics suite. Each suite draws from its own stream so
/// changing one suite's case count leaves the others unchanged.
pub fn run_tp_numerics(cfg: &VerifyConfig) -> Result<VerifyReport> {
    let stream = |s: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(s);
        rng
    };
    let mut cases = Vec::new();
    scalar_loop_suite(cfg, &mut stream(1), &mut cases)?;
    permutation_suite(&mut stream(2), &mut cases)?;
    sync_suite(cfg, &mut stream(3), &mut cases)?;
    fd_suite(cfg, &mut stream(4), &mut cases)?;
    Ok(VerifyReport { seed: cfg.seed, cases })
}
