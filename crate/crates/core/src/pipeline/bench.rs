use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::ssm::{selective_scan, selective_scan_parallel, ScanInputs};
use crate::tensor::Tensor;

pub const EQUIVALENCE_TOL: f64 = 1e-10;

/// Short lengths are repeated within one timed sample until it covers this many timesteps.
pub const MIN_SAMPLE_STEPS: usize = 1 << 16;

/// Owned random operands of one scan.
#[derive(Clone, Debug)]
pub struct ScanOperands<T> {
    pub u: Tensor<T>,
    pub delta: Tensor<T>,
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub c: Tensor<T>,
    pub d: Tensor<T>,
}

impl<T: Real> ScanOperands<T> {
    /// Δ ∈ [1e-3, 0.1], A ∈ [-2, -0.1]: the range a trained block produces.
    pub fn random<R: Rng + ?Sized>(batch: usize, len: usize, chans: usize, state: usize, rng: &mut R) -> Self {
        Self {
            u: Tensor::randn(vec![batch, len, chans], 1.0, rng),
            delta: Tensor::rand_uniform(vec![batch, len, chans], 1e-3, 0.1, rng),
            a: Tensor::rand_uniform(vec![chans, state], -2.0, -0.1, rng),
            b: Tensor::randn(vec![batch, len, state], 1.0, rng),
            c: Tensor::randn(vec![batch, len, state], 1.0, rng),
            d: Tensor::randn(vec![chans], 1.0, rng),
        }
    }

    pub fn inputs(&self) -> ScanInputs<'_, T> {
        ScanInputs {
            u: &self.u,
            delta: &self.delta,
            a: &self.a,
            b: &self.b,
            c: &self.c,
            d: &self.d,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub len: usize,
    pub sequential_s: f64,
    pub parallel_s: f64,
    pub max_abs_diff: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub runs: usize,
    pub chans: usize,
    pub state: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            runs: 10,
            chans: 16,
            state: 8,
            seed: 0,
        }
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Chunk length used by the benchmark's parallel scan.
pub fn parallel_chunk(len: usize) -> usize {
    let threads = rayon::current_num_threads().max(1);
    len.div_ceil(4 * threads).max(64)
}

/// Median wall time per call of the sequential and chunked scans for each
/// length; the two outputs are compared on every length.
pub fn bench_scan(lengths: &[usize], cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.runs == 0 || lengths.contains(&0) {
        return Err(Error::InvalidArgument("runs and lengths must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    lengths
        .iter()
        .map(|&len| {
            let ops = ScanOperands::<f64>::random(1, len, cfg.chans, cfg.state, &mut rng);
            let reference = selective_scan(ops.inputs())?;
            let chunked = selective_scan_parallel(ops.inputs(), parallel_chunk(len))?;
            let max_abs_diff = reference.max_abs_diff(&chunked);
            if !(max_abs_diff <= EQUIVALENCE_TOL) {
                return Err(Error::Numeric(format!("scans disagree by {max_abs_diff:e} at L={len}")));
            }
            let reps = (MIN_SAMPLE_STEPS / len).max(1);
            let mut seq = Vec::with_capacity(cfg.runs);
            let mut par = Vec::with_capacity(cfg.runs);
            for _ in 0..cfg.runs {
                let t = Instant::now();
                for _ in 0..reps {
                    std::hint::black_box(selective_scan(ops.inputs())?);
                }
                seq.push(t.elapsed().as_secs_f64() / reps as f64);
                let t = Instant::now();
                for _ in 0..reps {
                    std::hint::black_box(selective_scan_parallel(ops.inputs(), parallel_chunk(len))?);
                }
                par.push(t.elapsed().as_secs_f64() / reps as f64);
            }
            Ok(BenchRow {
                len,
                sequential_s: median(&mut seq),
                parallel_s: median(&mut par),
                max_abs_diff,
            })
        })
        .collect()
}

/// Least-squares slope of `log t` against `log L`.
pub fn scaling_exponent(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

pub fn format_bench(rows: &[BenchRow]) -> String {
    let mut s = format!("{:>8} {:>14} {:>14} {:>12}\n", "L", "sequential (s)", "parallel (s)", "max |diff|");
    for r in rows {
        s += &format!("{:>8} {:>14.6} {:>14.6} {:>12.2e}\n", r.len, r.sequential_s, r.parallel_s, r.max_abs_diff);
    }
    let pts = |f: fn(&BenchRow) -> f64| rows.iter().map(|r| (r.len as f64, f(r))).collect::<Vec<_>>();
    if let (Some(a), Some(b)) = (scaling_exponent(&pts(|r| r.sequential_s)), scaling_exponent(&pts(|r| r.parallel_s))) {
        s += &format!("scaling exponent: sequential {a:.3}, parallel {b:.3}\n");
    }
    s
}
