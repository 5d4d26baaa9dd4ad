//! Forward-pass scaling benchmark of the two token mixers: multi-head
//! self-attention versus gate, global convolution and ModReLU.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::autodiff::ParamStore;
use crate::layers::{
    ghc_forward, kaiming_uniform, mhsa_forward, modrelu, normal, spectral_gate, AttentionWeights, GlobalKernel, LayerError,
    GATE_BIAS_INIT,
};
use crate::numerics::{ComplexTensor, RealTensor};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid benchmark config: {0}")]
    Config(String),
    #[error(transparent)]
    Layer(#[from] LayerError),
}

pub type Result<T> = std::result::Result<T, BenchError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mixer {
    Mhsa,
    Ghc,
}

impl Mixer {
    pub fn as_str(self) -> &'static str {
        match self {
            Mixer::Mhsa => "mhsa",
            Mixer::Ghc => "ghc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub n_list: Vec<usize>,
    pub d: usize,
    pub heads: usize,
    pub reps: usize,
    /// Smallest N included in the slope fit.
    pub fit_min_n: usize,
    /// Each timed sample repeats the call until at least this long.
    pub min_sample_ms: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { n_list: vec![128, 256, 512, 1024, 2048, 4096], d: 64, heads: 4, reps: 11, fit_min_n: 512, min_sample_ms: 5.0, seed: 0 }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BenchError::Config(m.into()));
        if self.n_list.iter().any(|n| !n.is_power_of_two()) || self.n_list.windows(2).any(|w| w[0] >= w[1]) {
            return bad("n_list must be ascending powers of two");
        }
        if self.reps < 11 {
            return bad("at least 11 repetitions are required");
        }
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad("d must be a positive multiple of heads");
        }
        if self.n_list.iter().filter(|&&n| n >= self.fit_min_n).count() < 2 {
            return bad("need at least two N values at or above fit_min_n");
        }
        Ok(())
    }
}

/// Fixed inputs for one (mixer, N) cell.
pub enum Workload {
    Mhsa { x: RealTensor, w: AttentionWeights, heads: usize },
    Ghc { z: ComplexTensor, w_gate: RealTensor, g: Vec<f64>, kernel: ComplexTensor, bias: Vec<f64> },
}

impl Workload {
    pub fn new(mixer: Mixer, n: usize, d: usize, heads: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (n as u64).rotate_left(17));
        Ok(match mixer {
            Mixer::Mhsa => {
                let x = normal(&mut rng, &[n, d], 1.0);
                let mut mk = || kaiming_uniform(&mut rng, &[d, d], d);
                let w = AttentionWeights { wq: mk(), wk: mk(), wv: mk(), wo: mk() };
                Workload::Mhsa { x, w, heads }
            }
            Mixer::Ghc => {
                let re = normal(&mut rng, &[n, d], 1.0);
                let im = normal(&mut rng, &[n, d], 1.0);
                let z = ComplexTensor::new(&[n, d], re.into_data(), im.into_data()).expect("shape");
                let w_gate = kaiming_uniform(&mut rng, &[2 * d, d], 2 * d);
                let mut store = ParamStore::new();
                let k = GlobalKernel::new(&mut store, "k", d, n, &mut rng)?;
                let kernel = k.value(&store);
                Workload::Ghc { z, w_gate, g: vec![GATE_BIAS_INIT; d], kernel, bias: vec![-0.1; d] }
            }
        })
    }

    /// One forward pass through the library's standard layer functions.
    pub fn run(&self) -> Result<Vec<f64>> {
        Ok(match self {
            Workload::Mhsa { x, w, heads } => mhsa_forward(x, w, *heads, false)?.into_data(),
            Workload::Ghc { z, w_gate, g, kernel, bias } => {
                let gated = spectral_gate(z, w_gate, g)?;
                let n = gated.shape()[0];
                let mixed = ghc_forward(&gated, kernel, n)?;
                let (re, im) = modrelu(&mixed, bias)?.into_parts();
                re.into_iter().chain(im).collect()
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub n: usize,
    pub median_ns: f64,
    pub q1_ns: f64,
    pub q3_ns: f64,
    /// Calls per timed sample.
    pub inner: usize,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per-call times for each N: one discarded warmup sample, then `reps`
/// samples, each repeating the call enough times to exceed the floor.
pub fn bench_mixer(mixer: Mixer, cfg: &BenchConfig) -> Result<Vec<Timing>> {
    let mut out = Vec::with_capacity(cfg.n_list.len());
    for &n in &cfg.n_list {
        let work = Workload::new(mixer, n, cfg.d, cfg.heads, cfg.seed)?;
        let t0 = Instant::now();
        black_box(work.run()?);
        let once = t0.elapsed().as_secs_f64() * 1e3;
        let inner = ((cfg.min_sample_ms / once.max(1e-6)).ceil() as usize).max(1);
        let sample = || -> Result<f64> {
            let t = Instant::now();
            for _ in 0..inner {
                black_box(work.run()?);
            }
            Ok(t.elapsed().as_nanos() as f64 / inner as f64)
        };
        sample()?;
        let mut times = (0..cfg.reps).map(|_| sample()).collect::<Result<Vec<f64>>>()?;
        times.sort_by(f64::total_cmp);
        out.push(Timing { n, median_ns: quantile(&times, 0.5), q1_ns: quantile(&times, 0.25), q3_ns: quantile(&times, 0.75), inner });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub points: usize,
}

/// Least-squares slope of `ln y` on `ln x` with a 95% Student-t interval
/// (zero width when only two points are available).
pub fn fit_loglog(points: &[(f64, f64)]) -> SlopeFit {
    let k = points.len();
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / k as f64;
    let my = ys.iter().sum::<f64>() / k as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let half = if k > 2 {
        let intercept = my - slope * mx;
        let rss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
        let se = (rss / (k - 2) as f64 / sxx).sqrt();
        let t = StudentsT::new(0.0, 1.0, (k - 2) as f64).expect("dof").inverse_cdf(0.975);
        t * se
    } else {
        0.0
    };
    SlopeFit { slope, ci_low: slope - half, ci_high: slope + half, points: k }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub config: BenchConfig,
    pub mhsa: Vec<Timing>,
    pub ghc: Vec<Timing>,
    pub mhsa_fit: SlopeFit,
    pub ghc_fit: SlopeFit,
    /// GHC slower than attention at the largest N.
    pub no_crossover: bool,
    pub metadata: Vec<(String, String)>,
}

pub fn machine_metadata() -> Vec<(String, String)> {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| s.lines().find(|l| l.starts_with("model name")).and_then(|l| l.split(':').nth(1)).map(|s| s.trim().to_string()))
        .unwrap_or_else(|| "unknown".into());
    vec![
        ("os".into(), std::env::consts::OS.into()),
        ("arch".into(), std::env::consts::ARCH.into()),
        ("cpu".into(), cpu),
        ("logical_cpus".into(), std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).to_string()),
        ("threads_used".into(), "1".into()),
        ("precision".into(), "f64".into()),
        ("timing".into(), "forward only; median of reps after one warmup; fixed CPU frequency assumed".into()),
    ]
}

pub fn run_scaling(cfg: &BenchConfig) -> Result<ScalingReport> {
    cfg.validate()?;
    let mhsa = bench_mixer(Mixer::Mhsa, cfg)?;
    let ghc = bench_mixer(Mixer::Ghc, cfg)?;
    let fit = |t: &[Timing]| {
        let pts: Vec<(f64, f64)> = t.iter().filter(|t| t.n >= cfg.fit_min_n).map(|t| (t.n as f64, t.median_ns)).collect();
        fit_loglog(&pts)
    };
    let no_crossover = match (mhsa.last(), ghc.last()) {
        (Some(a), Some(g)) => g.median_ns >= a.median_ns,
        _ => true,
    };
    Ok(ScalingReport {
        config: cfg.clone(),
        mhsa_fit: fit(&mhsa),
        ghc_fit: fit(&ghc),
        mhsa,
        ghc,
        no_crossover,
        metadata: machine_metadata(),
    })
}

impl ScalingReport {
    /// Per-cell timings as a comma-separated table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("primitive,n,d,median_ns,q1_ns,q3_ns,inner\n");
        for (name, rows) in [("mhsa", &self.mhsa), ("ghc", &self.ghc)] {
            for t in rows {
                writeln!(out, "{name},{},{},{:.1},{:.1},{:.1},{}", t.n, self.config.d, t.median_ns, t.q1_ns, t.q3_ns, t.inner).expect("write");
            }
        }
        out
    }

    /// `primitive,slope,ci_low,ci_high` lines.
    pub fn summary(&self) -> String {
        let mut out = String::from("primitive,slope,ci_low,ci_high\n");
        for (name, f) in [("mhsa", self.mhsa_fit), ("ghc", self.ghc_fit)] {
            writeln!(out, "{name},{:.4},{:.4},{:.4}", f.slope, f.ci_low, f.ci_high).expect("write");
        }
        if self.no_crossover {
            out.push_str("# flag: no crossover, ghc not faster than mhsa at the largest N\n");
        }
        out
    }

    pub fn metadata_text(&self) -> String {
        self.metadata.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_law_fit() {
        let pts: Vec<(f64, f64)> = [64.0, 128.0, 256.0, 512.0].iter().map(|&n: &f64| (n, 3.0 * n.powf(1.7))).collect();
        let f = fit_loglog(&pts);
        assert!((f.slope - 1.7).abs() < 1e-12);
        assert!(f.ci_high - f.ci_low < 1e-6);
    }

    #[test]
    fn noisy_fit_interval_covers_truth() {
        let noise = [1.05, 0.97, 1.02, 0.99, 1.03];
        let pts: Vec<(f64, f64)> = (0..5).map(|i| {
            let n = 2f64.powi(i + 7);
            (n, n * n * noise[i as usize])
        }).collect();
        let f = fit_loglog(&pts);
        assert!(f.ci_low < 2.0 && 2.0 < f.ci_high, "{f:?}");
        assert!(f.ci_low < f.slope && f.slope < f.ci_high);
    }

    #[test]
    fn workloads_use_library_paths() {
        for mixer in [Mixer::Mhsa, Mixer::Ghc] {
            let w = Workload::new(mixer, 16, 8, 2, 3).unwrap();
            let out = w.run().unwrap();
            let direct = match &w {
                Workload::Mhsa { x, w, heads } => mhsa_forward(x, w, *heads, false).unwrap().into_data(),
                Workload::Ghc { z, w_gate, g, kernel, bias } => {
                    let y = modrelu(&ghc_forward(&spectral_gate(z, w_gate, g).unwrap(), kernel, 16).unwrap(), bias).unwrap();
                    y.re().iter().chain(y.im()).copied().collect()
                }
            };
            assert_eq!(out, direct);
            assert_eq!(out, w.run().unwrap());
        }
    }

    #[test]
    fn config_validation() {
        assert!(BenchConfig::default().validate().is_ok());
        assert!(BenchConfig { reps: 5, ..Default::default() }.validate().is_err());
        assert!(BenchConfig { n_list: vec![100, 200], ..Default::default() }.validate().is_err());
    }

    #[test]
    fn tiny_run_produces_report() {
        let cfg = BenchConfig { n_list: vec![16, 32, 64], d: 8, heads: 2, reps: 11, fit_min_n: 16, min_sample_ms: 0.05, seed: 1 };
        let r = run_scaling(&cfg).unwrap();
        assert_eq!(r.mhsa.len(), 3);
        assert!(r.mhsa.iter().all(|t| t.q1_ns <= t.median_ns && t.median_ns <= t.q3_ns));
        let s = r.summary();
        assert!(s.starts_with("primitive,slope,ci_low,ci_high\nmhsa,"));
        assert_eq!(r.to_csv().lines().count(), 7);
        assert!(r.metadata_text().contains("threads_used=1"));
    }
}
