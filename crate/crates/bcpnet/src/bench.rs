//! Latency harness: warmup passes, repeated timed forward passes, robust
//! statistics.
//!
//! Timing wraps the forward pass only — input synthesis and reporting stay
//! outside the clock. The harness is strictly single-threaded and runs one
//! benchmark at a time in-process; the median is the headline statistic
//! because desk hardware schedules noisily.

use std::time::Instant;

use crate::complexity::count_macs;
use crate::error::{Error, Result};
use crate::graph::{forward, ModelGraph, WeightStore};
use crate::rng::Rng;
use crate::tensor::Tensor4;

/// The eight resolutions of the published speed table.
pub const SPEED_TABLE_RESOLUTIONS: [(usize, usize); 8] = [
    (360, 640),
    (512, 1024),
    (720, 960),
    (720, 1280),
    (768, 1536),
    (1080, 1920),
    (1024, 1024),
    (1024, 2048),
];

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub resolution: (usize, usize),
    pub warmup_iters: usize,
    pub timed_iters: usize,
    /// Wall time of each timed pass, milliseconds.
    pub times_ms: Vec<f64>,
    pub median_ms: f64,
    /// `1000 / median_ms`.
    pub fps: f64,
    pub params: u64,
    pub macs: u64,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Time the forward pass at every requested resolution. Results come back
/// sorted by pixel count. `warmup >= 1` and `iters >= 10` are required.
pub fn run_bench(
    graph: &ModelGraph,
    weights: &WeightStore<f32>,
    resolutions: &[(usize, usize)],
    warmup: usize,
    iters: usize,
) -> Result<Vec<BenchResult>> {
    if warmup == 0 {
        return Err(Error::Config("benchmark needs at least 1 warmup pass".into()));
    }
    if iters < 10 {
        return Err(Error::Config("benchmark needs at least 10 timed passes".into()));
    }
    if resolutions.is_empty() {
        return Err(Error::Config("benchmark needs at least one resolution".into()));
    }
    let mut ordered: Vec<(usize, usize)> = resolutions.to_vec();
    ordered.sort_by_key(|&(h, w)| h * w);

    let mut rng = Rng::new(0xBE_7C_11);
    let mut results = Vec::with_capacity(ordered.len());
    for (h, w) in ordered {
        let x = Tensor4::from_fn((1, 3, h, w), |_, _, _, _| rng.uniform(0.0, 1.0) as f32)?;
        for _ in 0..warmup {
            forward(graph, weights, &x)?;
        }
        let mut times = Vec::with_capacity(iters);
        for _ in 0..iters {
            let t0 = Instant::now();
            let out = forward(graph, weights, &x)?;
            times.push(t0.elapsed().as_secs_f64() * 1000.0);
            drop(out);
        }
        let mut sorted = times.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
        let median_ms = median(&sorted);
        let report = count_macs(graph, h, w)?;
        results.push(BenchResult {
            resolution: (h, w),
            warmup_iters: warmup,
            timed_iters: iters,
            times_ms: times,
            median_ms,
            fps: 1000.0 / median_ms,
            params: report.total_params,
            macs: report.total_macs,
        });
    }
    Ok(results)
}

/// `h,w,params,macs,median_ms,fps` CSV.
pub fn bench_to_csv(results: &[BenchResult]) -> String {
    let mut out = String::from("h,w,params,macs,median_ms,fps\n");
    for r in results {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.resolution.0, r.resolution.1, r.params, r.macs, r.median_ms, r.fps
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_bcpnet, init_weights, ModelConfig};

    fn tiny_graph() -> ModelGraph {
        build_bcpnet(&ModelConfig { num_classes: 3, ..Default::default() }).unwrap()
    }

    #[test]
    fn validates_protocol_parameters() {
        let g = tiny_graph();
        let w = init_weights(&g, 1);
        assert!(run_bench(&g, &w, &[(64, 64)], 0, 10).is_err());
        assert!(run_bench(&g, &w, &[(64, 64)], 1, 9).is_err());
        assert!(run_bench(&g, &w, &[], 1, 10).is_err());
    }

    #[test]
    fn results_sorted_with_consistent_stats() {
        let g = tiny_graph();
        let w = init_weights(&g, 1);
        let results = run_bench(&g, &w, &[(128, 128), (64, 64)], 1, 10).unwrap();
        assert_eq!(results.len(), 2);
        assert_eq!(results[0].resolution, (64, 64));
        assert_eq!(results[1].resolution, (128, 128));
        for r in &results {
            assert_eq!(r.times_ms.len(), 10);
            // fps * median == 1000 within float rounding.
            assert!((r.fps * r.median_ms - 1000.0).abs() < 1e-6);
            assert_eq!(r.macs, count_macs(&g, r.resolution.0, r.resolution.1).unwrap().total_macs);
        }
    }

    #[test]
    fn csv_layout() {
        let g = tiny_graph();
        let w = init_weights(&g, 1);
        let results = run_bench(&g, &w, &[(64, 64)], 1, 10).unwrap();
        let csv = bench_to_csv(&results);
        assert!(csv.starts_with("h,w,params,macs,median_ms,fps\n"));
        assert_eq!(csv.lines().count(), 2);
    }
}
