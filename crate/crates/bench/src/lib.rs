//! Timing harness for single routing calls.
//!
//! Every case routes a fixed batch of pre-generated windows in `f32`. Only the
//! routing calls are timed; vote generation and checksumming happen outside the
//! timed region. Each timed run is checked bitwise against an untimed reference
//! run so a broken kernel is never measured.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::hint::black_box;
use std::str::FromStr;
use std::time::{Duration, Instant};

use capsroute_core::routing::{route, ActivationParams, RoutingConfig, RoutingMethod, VoteTensor, POSE_DIM};
use capsroute_core::{rng, training, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Smallest sample, in multiples of the measured timer resolution, that is
/// accepted as a measurement.
pub const MIN_RESOLUTION_MULTIPLE: f64 = 100.0;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid bench case: {0}")]
    InvalidCase(String),

    #[error(
        "timer resolution ({resolution_ns} ns) is too coarse for a {sample_ns} ns sample; \
         increase the batch size"
    )]
    TimerResolution { resolution_ns: u64, sample_ns: u64 },

    #[error("{0} training worker thread(s) are active; benchmarks must run alone")]
    WorkersActive(usize),

    #[error("{method} output checksum {found:#018x} differs from reference {expected:#018x}")]
    Checksum { method: RoutingMethod, expected: u64, found: u64 },

    #[error(transparent)]
    Core(#[from] capsroute_core::Error),
}

pub type Result<T> = std::result::Result<T, BenchError>;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchCase {
    pub n_in: usize,
    pub n_out: usize,
    pub method: RoutingMethod,
    pub iterations: usize,
    /// Windows routed per timed sample.
    pub batch: usize,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchCase {
    /// A 3×3 grid of 8 capsule types routed to 16 outputs.
    fn default() -> Self {
        BenchCase {
            n_in: 72,
            n_out: 16,
            method: RoutingMethod::Frem,
            iterations: 2,
            batch: 64,
            reps: 100,
            warmup: 5,
            seed: 0,
        }
    }
}

impl BenchCase {
    pub fn validate(&self) -> Result<()> {
        if self.n_in == 0 || self.n_out == 0 || self.batch == 0 {
            return Err(BenchError::InvalidCase("n_l, n_out and batch must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(BenchError::InvalidCase("iterations must be >= 1".into()));
        }
        if self.reps < 30 {
            return Err(BenchError::InvalidCase(format!("reps must be >= 30, got {}", self.reps)));
        }
        if self.warmup < 3 {
            return Err(BenchError::InvalidCase(format!("warmup must be >= 3, got {}", self.warmup)));
        }
        if self.method == RoutingMethod::Rba {
            return Err(BenchError::InvalidCase("the rba variant is not benchmarked".into()));
        }
        Ok(())
    }

    pub fn with_method(&self, method: RoutingMethod) -> Self {
        BenchCase { method, ..self.clone() }
    }

    fn routing_config(&self) -> RoutingConfig {
        RoutingConfig {
            iterations: self.iterations,
            ..RoutingConfig::default()
        }
    }
}

/// Shape fields of a case given as `n_l=72,n_out=16,iters=2[,batch=64]`. The
/// remaining fields keep their defaults.
impl FromStr for BenchCase {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        let mut case = BenchCase::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| BenchError::InvalidCase(format!("expected key=value, got {part:?}")))?;
            let n: usize = value
                .trim()
                .parse()
                .map_err(|_| BenchError::InvalidCase(format!("{key}: not a count: {value:?}")))?;
            match key.trim() {
                "n_l" | "n_in" => case.n_in = n,
                "n_out" => case.n_out = n,
                "iters" | "iterations" => case.iterations = n,
                "batch" => case.batch = n,
                other => return Err(BenchError::InvalidCase(format!("unknown case key {other:?}"))),
            }
        }
        Ok(case)
    }
}

/// Wall-clock statistics of one case, in microseconds per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchStats {
    pub case: BenchCase,
    pub samples_us: Vec<f64>,
    pub mean_us: f64,
    pub std_us: f64,
    pub median_us: f64,
    pub min_us: f64,
    pub checksum: u64,
}

impl BenchStats {
    pub fn method(&self) -> RoutingMethod {
        self.case.method
    }

    /// Summary statistics of raw samples; `std_us` is the sample standard deviation.
    pub fn from_samples(case: BenchCase, samples_us: Vec<f64>, checksum: u64) -> Self {
        let n = samples_us.len() as f64;
        let mean = samples_us.iter().sum::<f64>() / n;
        let var = if samples_us.len() > 1 {
            samples_us.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let mut sorted = samples_us.clone();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len().is_multiple_of(2) {
            0.5 * (sorted[mid - 1] + sorted[mid])
        } else {
            sorted[mid]
        };
        BenchStats {
            case,
            mean_us: mean,
            std_us: var.sqrt(),
            median_us: median,
            min_us: sorted[0],
            samples_us,
            checksum,
        }
    }
}

/// Pre-generated inputs of a case: `batch` windows of votes with activations.
pub struct Workload {
    pub windows: Vec<VoteTensor<f32>>,
    pub params: ActivationParams<f32>,
}

impl Workload {
    /// Votes drawn around `n_out` cluster centers, spread small enough to keep most
    /// pairs inside the Epanechnikov support under the ℓ1 metric.
    pub fn generate(case: &BenchCase) -> Result<Self> {
        let mut rng = rng::stream(case.seed, "bench.votes");
        let noise = Normal::new(0.0f32, 0.01).expect("valid normal");
        let mut windows = Vec::with_capacity(case.batch);
        for _ in 0..case.batch {
            let centers: Vec<f32> = (0..case.n_out * POSE_DIM).map(|_| rng.random_range(-0.05..0.05)).collect();
            let votes = Tensor::from_fn([case.n_in, case.n_out, POSE_DIM], |k| {
                centers[k % (case.n_out * POSE_DIM)] + noise.sample(&mut rng)
            })?;
            let acts = Tensor::from_fn([case.n_in], |_| rng.random_range(0.05f32..1.0))?;
            windows.push(VoteTensor::new(votes, acts)?);
        }
        Ok(Workload {
            windows,
            params: ActivationParams::identity(case.n_out, POSE_DIM),
        })
    }
}

fn fnv_fold(mut h: u64, bits: u32) -> u64 {
    for b in bits.to_le_bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// FNV-1a over the bit patterns of every output pose and activation.
pub fn checksum(outputs: &[(Tensor<f32>, Tensor<f32>)]) -> u64 {
    outputs.iter().fold(0xcbf2_9ce4_8422_2325, |h, (v, a)| {
        v.data().iter().chain(a.data()).fold(h, |h, x| fnv_fold(h, x.to_bits()))
    })
}

fn route_all(
    method: RoutingMethod,
    work: &Workload,
    cfg: &RoutingConfig,
    out: &mut Vec<(Tensor<f32>, Tensor<f32>)>,
) -> Result<()> {
    out.clear();
    for votes in &work.windows {
        let (state, acts) = route(method, black_box(votes), cfg, &work.params)?;
        out.push((state.v, acts));
    }
    Ok(())
}

/// Smallest nonzero step of the monotonic clock observed over a short probe.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..200 {
        let t0 = Instant::now();
        let mut t1 = Instant::now();
        while t1 == t0 {
            t1 = Instant::now();
        }
        best = best.min(t1 - t0);
    }
    best
}

/// Rejects a sample shorter than [`MIN_RESOLUTION_MULTIPLE`] clock steps.
pub fn check_resolution(sample: Duration, resolution: Duration) -> Result<()> {
    if sample.as_secs_f64() < MIN_RESOLUTION_MULTIPLE * resolution.as_secs_f64() {
        return Err(BenchError::TimerResolution {
            resolution_ns: resolution.as_nanos() as u64,
            sample_ns: sample.as_nanos() as u64,
        });
    }
    Ok(())
}

/// Times `case.reps` samples after `case.warmup` untimed ones.
pub fn run_bench(case: &BenchCase) -> Result<BenchStats> {
    case.validate()?;
    let workers = training::active_workers();
    if workers > 0 {
        return Err(BenchError::WorkersActive(workers));
    }
    let cfg = case.routing_config();
    cfg.validate(case.method)?;
    let work = Workload::generate(case)?;

    let mut out = Vec::with_capacity(case.batch);
    route_all(case.method, &work, &cfg, &mut out)?;
    let expected = checksum(&out);

    for _ in 0..case.warmup {
        route_all(case.method, &work, &cfg, &mut out)?;
    }
    let resolution = timer_resolution();
    let mut samples = Vec::with_capacity(case.reps);
    for _ in 0..case.reps {
        let t0 = Instant::now();
        route_all(case.method, &work, &cfg, &mut out)?;
        let elapsed = t0.elapsed();
        let found = checksum(&out);
        if found != expected {
            return Err(BenchError::Checksum { method: case.method, expected, found });
        }
        check_resolution(elapsed, resolution)?;
        samples.push(elapsed.as_secs_f64() * 1e6);
    }
    Ok(BenchStats::from_samples(case.clone(), samples, expected))
}

/// One row of a comparison report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: RoutingMethod,
    pub n_in: usize,
    pub n_out: usize,
    pub iterations: usize,
    pub batch: usize,
    pub mean_us: f64,
    pub std_us: f64,
    pub median_us: f64,
    /// Mean over the EM-baseline mean at the same shape, if that shape has one.
    pub ratio_vs_em: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

type ShapeKey = (usize, usize, usize, usize);

fn shape_key(c: &BenchCase) -> ShapeKey {
    (c.n_in, c.n_out, c.iterations, c.batch)
}

/// Per-method rows with ratios against the EM baseline, in input order.
pub fn compare_report(stats: &[BenchStats]) -> Result<Report> {
    let mut methods: BTreeMap<ShapeKey, Vec<RoutingMethod>> = BTreeMap::new();
    for s in stats {
        methods.entry(shape_key(&s.case)).or_default().push(s.method());
    }
    if !methods.values().any(|m| m.len() >= 2) {
        return Err(BenchError::InvalidCase("a report needs two methods at one shape".into()));
    }
    let em_mean: BTreeMap<ShapeKey, f64> = stats
        .iter()
        .filter(|s| s.method() == RoutingMethod::EmBaseline)
        .map(|s| (shape_key(&s.case), s.mean_us))
        .collect();
    let rows = stats
        .iter()
        .map(|s| ReportRow {
            method: s.method(),
            n_in: s.case.n_in,
            n_out: s.case.n_out,
            iterations: s.case.iterations,
            batch: s.case.batch,
            mean_us: s.mean_us,
            std_us: s.std_us,
            median_us: s.median_us,
            ratio_vs_em: em_mean.get(&shape_key(&s.case)).map(|em| s.mean_us / em),
        })
        .collect();
    Ok(Report { rows })
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,n_l,n_out,iters,mean_us,std_us,ratio_vs_em\n");
        for r in &self.rows {
            let ratio = r.ratio_vs_em.map(|x| format!("{x:.4}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{:.3},{:.3},{}",
                r.method, r.n_in, r.n_out, r.iterations, r.mean_us, r.std_us, ratio
            );
        }
        s
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<6} {:>5} {:>5} {:>5} {:>5} {:>12} {:>10} {:>12} {:>8}",
            "method", "n_l", "n_out", "iters", "batch", "mean_us", "std_us", "median_us", "vs_em"
        )?;
        for r in &self.rows {
            let ratio = r.ratio_vs_em.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
            writeln!(
                f,
                "{:<6} {:>5} {:>5} {:>5} {:>5} {:>12.1} {:>10.1} {:>12.1} {:>8}",
                r.method, r.n_in, r.n_out, r.iterations, r.batch, r.mean_us, r.std_us, r.median_us, ratio
            )?;
        }
        Ok(())
    }
}
