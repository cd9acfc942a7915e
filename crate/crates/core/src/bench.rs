//! Timing and peak-memory comparison of the literal and factored NetVLAD
//! computations.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alloc_stats;
use crate::error::Result;
use crate::numerics::Matrix;
use crate::pooling::{netvlad_backward, netvlad_forward_efficient, netvlad_forward_naive, ClusterParams, PoolOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub frames: usize,
    pub clusters: usize,
    pub dim: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { frames: 30, clusters: 64, dim: 512, batch: 256, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathTiming {
    pub total_seconds: f64,
    pub per_sample_ms: f64,
    /// Peak bytes allocated during one forward and backward pass, when the
    /// counting allocator is installed.
    pub peak_bytes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub naive: PathTiming,
    pub efficient: PathTiming,
    /// Naive time over efficient time.
    pub speedup: f64,
    /// Naive peak over efficient peak.
    pub memory_ratio: Option<f64>,
}

type Forward = fn(&Matrix, &ClusterParams) -> Result<PoolOutput>;

fn step(forward: Forward, x: &Matrix, params: &ClusterParams, upstream: &[f64]) -> Result<f64> {
    let out = forward(x, params)?;
    let (dx, _) = netvlad_backward(params, &out, upstream)?;
    Ok(dx.get(0, 0))
}

fn time_path(forward: Forward, inputs: &[Matrix], params: &ClusterParams, upstream: &[f64]) -> Result<PathTiming> {
    let (first, peak) = alloc_stats::measure_peak(|| step(forward, &inputs[0], params, upstream));
    first?;
    let started = Instant::now();
    let mut sink = 0.0;
    for x in inputs {
        sink += step(forward, x, params, upstream)?;
    }
    std::hint::black_box(sink);
    let total_seconds = started.elapsed().as_secs_f64();
    Ok(PathTiming {
        total_seconds,
        per_sample_ms: 1000.0 * total_seconds / inputs.len() as f64,
        peak_bytes: alloc_stats::is_active().then_some(peak),
    })
}

/// Runs forward and backward over a batch of random samples, one sample at
/// a time on the calling thread, through each path.
pub fn bench_pool(cfg: &BenchConfig) -> Result<BenchReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = ClusterParams::random(cfg.clusters, cfg.dim, true, &mut rng);
    let inputs: Vec<Matrix> = (0..cfg.batch.max(1))
        .map(|_| Matrix::from_fn(cfg.frames, cfg.dim, |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let upstream: Vec<f64> = (0..cfg.clusters * cfg.dim).map(|_| rng.random_range(-1.0..1.0)).collect();

    let naive = time_path(netvlad_forward_naive, &inputs, &params, &upstream)?;
    let efficient = time_path(netvlad_forward_efficient, &inputs, &params, &upstream)?;
    let memory_ratio = match (naive.peak_bytes, efficient.peak_bytes) {
        (Some(n), Some(e)) if e > 0 => Some(n as f64 / e as f64),
        _ => None,
    };
    Ok(BenchReport {
        config: *cfg,
        speedup: naive.total_seconds / efficient.total_seconds,
        naive,
        efficient,
        memory_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_bench_runs() {
        let report = bench_pool(&BenchConfig { frames: 4, clusters: 3, dim: 5, batch: 3, seed: 1 }).unwrap();
        assert!(report.speedup.is_finite() && report.speedup > 0.0);
        assert_eq!(report.naive.peak_bytes.is_some(), alloc_stats::is_active());
    }
}
