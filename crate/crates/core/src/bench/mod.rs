//! Attention scaling sweeps and power-law fits.

mod flops;

pub use flops::{
    model_flops, model_flops_of, relu_linear_flops, softmax_flops, FlopCounter, ModelFlops,
};

use std::fmt;
use std::hint::black_box;
use std::io::Write;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention;
use crate::error::{config_err, Error, Result};
use crate::memory;
use crate::par;
use crate::tensor::Tensor;

/// Untimed runs before measurement starts.
pub const WARMUP: usize = 2;
pub const MIN_REPEATS: usize = 5;
/// A median shorter than this many timer ticks is treated as unmeasurable.
const MIN_TICKS: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mechanism {
    Softmax,
    ReluLinear,
}

impl Mechanism {
    pub const ALL: [Mechanism; 2] = [Self::ReluLinear, Self::Softmax];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Softmax => "softmax",
            Self::ReluLinear => "relu_linear",
        }
    }

    pub fn flops(self, n: usize, d: usize) -> u64 {
        match self {
            Self::Softmax => softmax_flops(n as u64, d as u64),
            Self::ReluLinear => relu_linear_flops(n as u64, d as u64, d as u64),
        }
    }

    /// Expected wall-time exponent band: `(center, half_width)`.
    pub fn slope_band(self) -> (f64, f64) {
        match self {
            Self::Softmax => (2.0, 0.3),
            Self::ReluLinear => (1.0, 0.2),
        }
    }

    fn run(self, q: &Tensor<f32>, k: &Tensor<f32>, v: &Tensor<f32>) -> Result<Tensor<f32>> {
        match self {
            Self::Softmax => attention::softmax_attention(q, k, v),
            Self::ReluLinear => {
                attention::relu_linear_attention(q, k, v, attention::DEFAULT_EPS as f32)
            }
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "softmax" => Ok(Self::Softmax),
            "relu_linear" | "relu-linear" | "linear" => Ok(Self::ReluLinear),
            _ => config_err(format!(
                "unknown mechanism `{s}` (expected softmax, relu_linear)"
            )),
        }
    }
}

/// Measurements for one `(mechanism, N, d)` cell.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub mechanism: Mechanism,
    pub n: usize,
    pub d: usize,
    /// Median over `times`.
    pub wall_time_s: f64,
    pub times: Vec<f64>,
    pub flops: u64,
    /// Peak bytes live during one call (zero without the counting allocator).
    pub peak_alloc_bytes: usize,
    /// Too fast to time reliably; excluded from fits.
    pub flagged: bool,
}

/// Seeded `N×d` query, key and value matrices, shared by every mechanism.
pub fn bench_inputs(n: usize, d: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>, Tensor<f32>) {
    let cell = seed ^ ((n as u64) << 24) ^ ((d as u64) << 8);
    let mut rng = ChaCha8Rng::seed_from_u64(cell);
    let q = Tensor::randn(&[n, d], 1.0, &mut rng);
    let k = Tensor::randn(&[n, d], 1.0, &mut rng);
    let v = Tensor::randn(&[n, d], 1.0, &mut rng);
    (q, k, v)
}

/// Smallest observable step of the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

fn median(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

/// Times `mechanism` at every `N` with `WARMUP` untimed runs and `repeats`
/// measured runs, on a single thread.
pub fn sweep_attention(
    mechanism: Mechanism,
    n_values: &[usize],
    d: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<BenchRecord>> {
    if n_values.len() < 4 {
        return config_err("a sweep needs at least four token counts");
    }
    if n_values.windows(2).any(|w| w[0] >= w[1]) || n_values[0] == 0 {
        return config_err("token counts must be positive and strictly ascending");
    }
    if repeats < MIN_REPEATS {
        return config_err(format!("at least {MIN_REPEATS} repeats are required"));
    }
    if d == 0 {
        return config_err("d must be positive");
    }
    let tick = timer_resolution().as_secs_f64();
    par::single_threaded(|| {
        let mut out = Vec::with_capacity(n_values.len());
        for &n in n_values {
            let (q, k, v) = bench_inputs(n, d, seed);
            for _ in 0..WARMUP {
                black_box(mechanism.run(&q, &k, &v)?);
            }
            let mut times = Vec::with_capacity(repeats);
            let mut peak = 0;
            for _ in 0..repeats {
                let start = Instant::now();
                let (res, stats) = memory::track(|| mechanism.run(black_box(&q), &k, &v));
                let dt = start.elapsed().as_secs_f64();
                black_box(res?);
                times.push(dt);
                peak = peak.max(stats.peak_bytes);
            }
            let wall = median(&times);
            out.push(BenchRecord {
                mechanism,
                n,
                d,
                wall_time_s: wall,
                times,
                flops: mechanism.flops(n, d),
                peak_alloc_bytes: peak,
                flagged: wall < MIN_TICKS * tick,
            });
        }
        Ok(out)
    })
}

/// Least-squares line through `(ln x, ln y)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub points: usize,
}

/// Fits `ln(wall_time) = slope·ln(N) + c` over the unflagged records.
pub fn fit_loglog_slope(records: &[BenchRecord]) -> Result<Fit> {
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| !r.flagged)
        .map(|r| (r.n as f64, r.wall_time_s))
        .collect();
    fit_loglog(&pts)
}

/// Ordinary least squares on log-transformed positive pairs.
pub fn fit_loglog(points: &[(f64, f64)]) -> Result<Fit> {
    if points.len() < 4 {
        return Err(Error::Fit(format!(
            "need at least 4 usable points, have {}",
            points.len()
        )));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::Fit("log-log fit needs positive values".into()));
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= 1e-24 {
        return Err(Error::Fit("all sizes are equal".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| (y - (slope * x + intercept)).powi(2))
        .sum();
    let ss_tot: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(Fit {
        slope,
        intercept,
        r2,
        points: points.len(),
    })
}

pub const CSV_HEADER: [&str; 7] = [
    "mechanism",
    "N",
    "d",
    "repeat",
    "wall_time_s",
    "flops",
    "peak_alloc_bytes",
];

/// One CSV row per measured repeat.
pub fn write_csv<W: Write>(w: W, records: &[BenchRecord]) -> Result<()> {
    let mut out = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w);
    out.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in records {
        for (i, t) in r.times.iter().enumerate() {
            out.write_record([
                r.mechanism.as_str().to_string(),
                r.n.to_string(),
                r.d.to_string(),
                i.to_string(),
                format!("{t:.9}"),
                r.flops.to_string(),
                r.peak_alloc_bytes.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flop_formulas_scale() {
        for d in [16, 64] {
            for n in [256usize, 1024] {
                let l = Mechanism::ReluLinear;
                assert_eq!(l.flops(2 * n, d), 2 * l.flops(n, d));
                let s = Mechanism::Softmax;
                assert_eq!(s.flops(2 * n, d), 4 * s.flops(n, d));
            }
        }
        assert_eq!(relu_linear_flops(10, 4, 4), 2 * 10 * 16 + 3 * 10 * 4);
    }

    #[test]
    fn exact_power_laws() {
        let ns = [256.0, 1024.0, 4096.0, 16384.0];
        let lin: Vec<_> = ns.iter().map(|&n| (n, 3e-7 * n)).collect();
        let quad: Vec<_> = ns.iter().map(|&n| (n, 5e-9 * n * n)).collect();
        let a = fit_loglog(&lin).unwrap();
        let b = fit_loglog(&quad).unwrap();
        assert!((a.slope - 1.0).abs() < 1e-9 && (a.r2 - 1.0).abs() < 1e-12);
        assert!((b.slope - 2.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_fits() {
        assert!(matches!(fit_loglog(&[(8.0, 1.0); 4]), Err(Error::Fit(_))));
        assert!(matches!(
            fit_loglog(&[(1.0, 1.0), (2.0, 2.0), (4.0, 4.0)]),
            Err(Error::Fit(_))
        ));
        assert!(matches!(
            fit_loglog(&[(1.0, 1.0), (2.0, 0.0), (4.0, 4.0), (8.0, 8.0)]),
            Err(Error::Fit(_))
        ));
    }

    #[test]
    fn flagged_records_are_excluded() {
        let rec = |n: usize, t: f64, flagged| BenchRecord {
            mechanism: Mechanism::ReluLinear,
            n,
            d: 8,
            wall_time_s: t,
            times: vec![t; 5],
            flops: 0,
            peak_alloc_bytes: 0,
            flagged,
        };
        let mut rs: Vec<_> = [1usize, 2, 4, 8]
            .iter()
            .map(|&n| rec(n, n as f64, false))
            .collect();
        rs.push(rec(16, 1e9, true));
        let f = fit_loglog_slope(&rs).unwrap();
        assert!((f.slope - 1.0).abs() < 1e-12);
        rs[0].flagged = true;
        assert!(fit_loglog_slope(&rs).is_err());
    }

    #[test]
    fn sweep_shape_and_csv() {
        let ns = [8, 16, 32, 64];
        let recs = sweep_attention(Mechanism::ReluLinear, &ns, 4, 5, 1).unwrap();
        assert_eq!(recs.len(), 4);
        assert!(recs
            .iter()
            .all(|r| r.times.len() == 5 && r.wall_time_s > 0.0));
        let mut buf = Vec::new();
        write_csv(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER.join(","));
        assert_eq!(lines.len(), 1 + 4 * 5);
        assert!(!text.contains('\r'));
        assert!(sweep_attention(Mechanism::Softmax, &[8, 4, 16, 32], 4, 5, 1).is_err());
        assert!(sweep_attention(Mechanism::Softmax, &[8, 16, 32], 4, 5, 1).is_err());
        assert!(sweep_attention(Mechanism::Softmax, &ns, 4, 4, 1).is_err());
    }

    #[test]
    fn inputs_shared_across_mechanisms() {
        let a = bench_inputs(32, 8, 5);
        let b = bench_inputs(32, 8, 5);
        assert_eq!(a, b);
        assert_ne!(a.0, bench_inputs(32, 8, 6).0);
    }

    #[test]
    fn model_flops_budget_and_scaling() {
        use crate::model::{ModelConfig, Variant};
        let cfg = ModelConfig::variant(Variant::M);
        let f224 = model_flops(&cfg, 224).unwrap();
        let g = f224.total as f64 / 1e9;
        assert!((g - 1.24).abs() / 1.24 <= 0.25, "{g} GMACs");
        assert_eq!(
            f224.total,
            f224.stem + f224.stages.iter().sum::<u64>() + f224.head
        );

        let f448 = model_flops(&cfg, 448).unwrap();
        assert_eq!(f448.stem, 4 * f224.stem);
        assert_eq!(f448.stages[0], 4 * f224.stages[0]);
        assert_eq!(f448.stages[1], 4 * f224.stages[1]);

        // Stage-3 attention: 196 tokens at 224, 1024 at 512.
        let f512 = model_flops(&cfg, 512).unwrap();
        assert_eq!(f224.attention[2] * 1024, f512.attention[2] * 196);
        let per_token = f224.attention[2] / 196;
        assert_eq!(per_token * 196, f224.attention[2]);
    }
}
