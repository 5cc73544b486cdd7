//! Wall-clock latency harness for the compensation-matrix kernels and
//! whole-layer calibration.
//!
//! Two comparisons: the plain row-by-row P computation against the fused
//! two-product kernel, and per-layer calibration latency with the
//! residual term off versus on. Every timed variant is verified against
//! its reference once per size before any measurement, so a fast-but-
//! wrong kernel cannot produce a benchmark row.

use std::time::{Duration, Instant};

use crate::engine::{calibrate_layer, Mode, QuantConfig};
use crate::error::{Error, Result};
use crate::linalg::{
    build_hessian, compute_p_fused, compute_p_reference, compute_p_rowloop, inverse_cholesky,
};
use crate::tensor::{gen_correlated, Dtype, Matrix, Seed};

/// Largest n the row-by-row reference is asked to grind through.
pub const BENCH_MAX_N: usize = 2048;
/// Calibration-stream length for the layer benchmark, fixed across sizes.
pub const LAYER_K: usize = 2048;
/// Untimed runs before measurement starts.
const WARMUPS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchVariant {
    PReference,
    PFused,
    GptqLayer,
    GptaqLayer,
}

impl BenchVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchVariant::PReference => "p_reference",
            BenchVariant::PFused => "p_fused",
            BenchVariant::GptqLayer => "gptq_layer",
            BenchVariant::GptaqLayer => "gptaq_layer",
        }
    }

    fn parse(s: &str) -> Result<BenchVariant> {
        Ok(match s {
            "p_reference" => BenchVariant::PReference,
            "p_fused" => BenchVariant::PFused,
            "gptq_layer" => BenchVariant::GptqLayer,
            "gptaq_layer" => BenchVariant::GptaqLayer,
            other => {
                return Err(Error::Format(format!("unknown bench variant {other:?}")))
            }
        })
    }
}

/// One measured configuration: median and interquartile range over
/// `reps` wall-clock runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchResult {
    pub variant: BenchVariant,
    pub n: usize,
    pub k: usize,
    pub reps: usize,
    pub median: Duration,
    pub iqr: Duration,
    pub threads: usize,
    pub dtype: Dtype,
}

pub const CSV_HEADER: &str = "variant,n,k,reps,median_us,iqr_us,threads,dtype";

fn dtype_str(d: Dtype) -> &'static str {
    match d {
        Dtype::F32 => "f32",
        Dtype::F64 => "f64",
    }
}

/// Microseconds with nanosecond resolution: three decimals are exact for
/// any Duration, so rows re-parse to the same value.
fn fmt_us(d: Duration) -> String {
    format!("{}.{:03}", d.as_micros(), d.as_nanos() % 1000)
}

fn parse_us(s: &str) -> Result<Duration> {
    let us: f64 = s
        .parse()
        .map_err(|_| Error::Format(format!("bad duration field {s:?}")))?;
    if !(us >= 0.0) {
        return Err(Error::Format(format!("negative duration {s:?}")));
    }
    Ok(Duration::from_nanos((us * 1000.0).round() as u64))
}

impl BenchResult {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.variant.as_str(),
            self.n,
            self.k,
            self.reps,
            fmt_us(self.median),
            fmt_us(self.iqr),
            self.threads,
            dtype_str(self.dtype)
        )
    }

    pub fn parse_csv_row(row: &str) -> Result<BenchResult> {
        let fields: Vec<&str> = row.trim().split(',').collect();
        if fields.len() != 8 {
            return Err(Error::Format(format!(
                "bench row has {} fields, expected 8",
                fields.len()
            )));
        }
        let count = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::Format(format!("bad count field {s:?}")))
        };
        let dtype = match fields[7] {
            "f32" => Dtype::F32,
            "f64" => Dtype::F64,
            other => return Err(Error::Format(format!("unknown dtype {other:?}"))),
        };
        Ok(BenchResult {
            variant: BenchVariant::parse(fields[0])?,
            n: count(fields[1])?,
            k: count(fields[2])?,
            reps: count(fields[3])?,
            median: parse_us(fields[4])?,
            iqr: parse_us(fields[5])?,
            threads: count(fields[6])?,
            dtype,
        })
    }
}

pub fn to_csv(results: &[BenchResult]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in results {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Effective kernel parallelism. The compute kernels are single-threaded;
/// ASYMCAL_THREADS is honored as a cap on top of that, so the recorded
/// value is what actually ran, not the budget.
pub fn thread_count() -> usize {
    let cap = std::env::var("ASYMCAL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1)
        .unwrap_or(usize::MAX);
    cap.min(1)
}

fn check_reps(reps: usize) -> Result<()> {
    if reps < 5 {
        return Err(Error::InvalidConfig(format!(
            "need at least 5 reps for a stable median, got {reps}"
        )));
    }
    Ok(())
}

fn check_size(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidConfig("bench size 0".into()));
    }
    if n > BENCH_MAX_N {
        return Err(Error::SizeCap {
            limit: BENCH_MAX_N,
            got: n,
        });
    }
    Ok(())
}

/// Sorts the samples and returns (median, interquartile range), both by
/// index: even counts average the middle pair, quartiles are the sorted
/// values at len/4 and 3·len/4.
fn summarize(times: &mut Vec<Duration>) -> (Duration, Duration) {
    times.sort_unstable();
    let len = times.len();
    let median = if len % 2 == 1 {
        times[len / 2]
    } else {
        (times[len / 2 - 1] + times[len / 2]) / 2
    };
    let iqr = times[(3 * len) / 4].saturating_sub(times[len / 4]);
    (median, iqr)
}

fn time_reps<F: FnMut() -> Result<()>>(reps: usize, mut f: F) -> Result<(Duration, Duration)> {
    for _ in 0..WARMUPS {
        f()?;
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        f()?;
        times.push(t0.elapsed());
    }
    Ok(summarize(&mut times))
}

fn p_inputs(n: usize) -> Result<(Matrix, Matrix, Matrix, crate::linalg::CholFactor)> {
    let seed = Seed(0xbe5c ^ n as u64);
    let x = gen_correlated(seed, n, n, 0.5)?;
    let mut dx = seed.stream(1).normal_matrix(n, n, Dtype::F64);
    for v in dx.data_mut() {
        *v *= 0.05;
    }
    let dx_xt = dx.matmul_nt(&x)?;
    let hs = build_hessian(&x, 0.01)?;
    let l = inverse_cholesky(&hs)?;
    Ok((x, dx, dx_xt, l))
}

/// Times the row-by-row and fused P computations at each size. Both
/// variants consume the same precomputed ΔX·Xᵀ — the calibration walk
/// accumulates that statistic while capturing activations, before P is
/// ever formed — so the timing isolates the P computation itself.
pub fn bench_p(sizes: &[usize], reps: usize) -> Result<Vec<BenchResult>> {
    check_reps(reps)?;
    let threads = thread_count();
    let mut out = Vec::with_capacity(sizes.len() * 2);
    for &n in sizes {
        check_size(n)?;
        let (x, dx, dx_xt, l) = p_inputs(n)?;

        // Three-way agreement before timing: the from-streams oracle,
        // the row loop, and the fused kernel.
        let oracle = compute_p_reference(&dx, &x, &l)?;
        let rowloop = compute_p_rowloop(&dx_xt, &l)?;
        let fused = compute_p_fused(&dx_xt, &l)?;
        let worst = oracle
            .max_abs_diff(&rowloop)?
            .max(oracle.max_abs_diff(&fused)?);
        if worst > 1e-8 {
            return Err(Error::DegenerateInput(format!(
                "P implementations disagree by {worst:e} at n={n}; refusing to time"
            )));
        }

        let (median, iqr) = time_reps(reps, || {
            compute_p_rowloop(&dx_xt, &l).map(drop)
        })?;
        out.push(BenchResult {
            variant: BenchVariant::PReference,
            n,
            k: n,
            reps,
            median,
            iqr,
            threads,
            dtype: Dtype::F64,
        });

        let (median, iqr) = time_reps(reps, || {
            compute_p_fused(&dx_xt, &l).map(drop)
        })?;
        out.push(BenchResult {
            variant: BenchVariant::PFused,
            n,
            k: n,
            reps,
            median,
            iqr,
            threads,
            dtype: Dtype::F64,
        });
    }
    Ok(out)
}

/// Times whole-layer calibration on square n×n layers with the residual
/// term off (plain error propagation) and on, with a shared calibration
/// stream of `k` columns.
pub fn bench_layer_k(sizes: &[usize], reps: usize, k: usize) -> Result<Vec<BenchResult>> {
    check_reps(reps)?;
    let threads = thread_count();
    let mut out = Vec::with_capacity(sizes.len() * 2);
    for &n in sizes {
        check_size(n)?;
        if k < n {
            return Err(Error::InvalidConfig(format!(
                "layer bench needs k >= n, got k={k} n={n}"
            )));
        }
        let seed = Seed(0x1a7e ^ n as u64);
        let w = seed.stream(0).normal_matrix(n, n, Dtype::F64);
        let x = gen_correlated(seed, n, k, 0.5)?;
        let mut x_tilde = x.clone();
        let noise = seed.stream(1).normal_matrix(n, k, Dtype::F64);
        for (t, nz) in x_tilde.data_mut().iter_mut().zip(noise.data()) {
            *t += 0.02 * nz;
        }
        let gptq_cfg = QuantConfig {
            mode: Mode::Gptq,
            ..QuantConfig::default()
        };
        let gptaq_cfg = QuantConfig {
            mode: Mode::Gptaq,
            ..QuantConfig::default()
        };

        // With identical streams the residual term must vanish exactly;
        // a mismatch means the mode plumbing is broken, so don't time it.
        let plain = calibrate_layer(&w, &x, &x, &gptq_cfg)?;
        let steered = calibrate_layer(&w, &x, &x, &gptaq_cfg)?;
        if plain.q.data() != steered.q.data() {
            return Err(Error::DegenerateInput(format!(
                "residual mode diverges from plain on identical streams at n={n}"
            )));
        }

        for (mode, variant) in [
            (Mode::Gptq, BenchVariant::GptqLayer),
            (Mode::Gptaq, BenchVariant::GptaqLayer),
        ] {
            let cfg = QuantConfig {
                mode,
                ..QuantConfig::default()
            };
            let (median, iqr) = time_reps(reps, || {
                let res = calibrate_layer(&w, &x, &x_tilde, &cfg)?;
                if !res.q.all_finite() {
                    return Err(Error::NanDetected { column: 0 });
                }
                Ok(())
            })?;
            out.push(BenchResult {
                variant,
                n,
                k,
                reps,
                median,
                iqr,
                threads,
                dtype: Dtype::F64,
            });
        }
    }
    Ok(out)
}

pub fn bench_layer(sizes: &[usize], reps: usize) -> Result<Vec<BenchResult>> {
    bench_layer_k(sizes, reps, LAYER_K)
}
