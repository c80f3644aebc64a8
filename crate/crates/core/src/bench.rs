//! Forward-time sweep of one lowered convolution over density levels.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowering::{conv_lowered, pack_filters, theoretical_speedup, ConvGeometry};
use crate::sparsity::prune_smallest_groups;
use crate::tensor::{Tensor3, Tensor4};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub geometry: ConvGeometry,
    pub taus: Vec<f64>,
    pub repeats: usize,
    pub warmup: usize,
    /// Forward calls timed together as one sample.
    pub calls_per_repeat: usize,
    pub seed: u64,
}

/// `τ ∈ {0.05, 0.10, …, 1.00}`.
pub fn density_grid() -> Vec<f64> {
    (1..=20).map(|k| k as f64 / 20.0).collect()
}

impl Default for BenchConfig {
    /// Second LeNet convolution: 20 → 50 maps, 5×5 kernels, 12×12 input.
    fn default() -> Self {
        BenchConfig {
            geometry: ConvGeometry::new(5, 20, 50, 0, 1, 12, 12).expect("LeNet conv2 geometry"),
            taus: density_grid(),
            repeats: 100,
            warmup: 5,
            calls_per_repeat: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub tau: f64,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub speedup: f64,
    pub theoretical_speedup: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    /// Per-call milliseconds for every repeat, one vector per row.
    pub samples_ms: Vec<Vec<f64>>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Time `conv_lowered` at each density. The dense reference is measured at
/// `τ = 1` with the same kernel and input; speedup is dense mean over sparse mean.
/// Runs on the calling thread only.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchResult> {
    if cfg.repeats < 2 {
        return Err(Error::input("bench needs at least 2 repeats for error bars"));
    }
    if cfg.calls_per_repeat == 0 {
        return Err(Error::input("calls_per_repeat must be positive"));
    }
    if cfg.taus.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
        return Err(Error::input("bench densities must lie in (0, 1]"));
    }
    let g = &cfg.geometry;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let kernel = Tensor4::from_vec(
        g.d,
        g.in_maps,
        g.out_maps,
        (0..g.d * g.d * g.in_maps * g.out_maps)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    )?;
    let input = Tensor3::from_vec(
        g.in_w,
        g.in_h,
        g.in_maps,
        (0..g.in_w * g.in_h * g.in_maps).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )?;

    // slot 0 is the dense reference; every round times each slot once so that
    // background load is spread evenly over the densities
    let mut slots = Vec::with_capacity(cfg.taus.len() + 1);
    for &tau in std::iter::once(&1.0).chain(&cfg.taus) {
        let mut k = kernel.clone();
        let q = prune_smallest_groups(&mut k, tau)?;
        let f = pack_filters(&k, &q)?;
        for _ in 0..cfg.warmup {
            std::hint::black_box(conv_lowered(&input, &f, g, &q)?);
        }
        slots.push((q, f));
    }
    let mut samples_ms = vec![Vec::with_capacity(cfg.repeats); slots.len()];
    for _ in 0..cfg.repeats {
        for ((q, f), samples) in slots.iter().zip(&mut samples_ms) {
            let start = Instant::now();
            for _ in 0..cfg.calls_per_repeat {
                std::hint::black_box(conv_lowered(std::hint::black_box(&input), f, g, q)?);
            }
            samples.push(start.elapsed().as_secs_f64() * 1e3 / cfg.calls_per_repeat as f64);
        }
    }

    let (dense_mean, _) = mean_std(&samples_ms[0]);
    let samples_ms = samples_ms.split_off(1);
    let rows = cfg
        .taus
        .iter()
        .zip(&slots[1..])
        .zip(&samples_ms)
        .map(|((&tau, (q, _)), samples)| {
            let (mean, std) = mean_std(samples);
            BenchRow {
                tau,
                mean_ms: mean,
                std_ms: std,
                speedup: dense_mean / mean,
                theoretical_speedup: theoretical_speedup(q).unwrap_or(f64::INFINITY),
            }
        })
        .collect();
    Ok(BenchResult { rows, samples_ms })
}

impl BenchResult {
    /// Columns `tau, mean_ms, std_ms, speedup, theoretical_speedup`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
    }

    /// Raw per-repeat timings, columns `tau, repeat, ms`.
    pub fn samples_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["tau", "repeat", "ms"])?;
        for (row, samples) in self.rows.iter().zip(&self.samples_ms) {
            for (k, ms) in samples.iter().enumerate() {
                w.write_record([row.tau.to_string(), k.to_string(), ms.to_string()])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
    }
}

pub fn parse_bench_csv(text: &str) -> Result<Vec<BenchRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let rows = r.deserialize().collect::<std::result::Result<Vec<BenchRow>, _>>()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchConfig {
        BenchConfig {
            geometry: ConvGeometry::new(3, 2, 3, 1, 1, 6, 6).unwrap(),
            taus: vec![0.5, 1.0],
            repeats: 3,
            warmup: 1,
            calls_per_repeat: 2,
            seed: 1,
        }
    }

    #[test]
    fn grid_spans_five_percent_steps() {
        let g = density_grid();
        assert_eq!(g.len(), 20);
        assert_eq!(g[0], 0.05);
        assert_eq!(g[19], 1.0);
    }

    #[test]
    fn rows_and_theory() {
        let res = run_bench(&small()).unwrap();
        assert_eq!(res.rows.len(), 2);
        // 18 groups, floor(18 · 0.5) pruned leaves 9
        assert_eq!(res.rows[0].theoretical_speedup, 2.0);
        assert_eq!(res.rows[1].theoretical_speedup, 1.0);
        assert!(res.samples_ms.iter().all(|s| s.len() == 3));
        assert!(res.rows.iter().all(|r| r.mean_ms > 0.0 && r.std_ms >= 0.0));
    }

    #[test]
    fn csv_round_trip() {
        let res = run_bench(&small()).unwrap();
        let text = res.to_csv().unwrap();
        assert!(text.starts_with("tau,mean_ms,std_ms,speedup,theoretical_speedup\n"));
        assert_eq!(parse_bench_csv(&text).unwrap(), res.rows);
        assert_eq!(res.samples_csv().unwrap().lines().count(), 1 + 6);
    }

    #[test]
    fn needs_two_repeats() {
        let mut c = small();
        c.repeats = 1;
        assert!(run_bench(&c).is_err());
        let mut c = small();
        c.taus = vec![0.0];
        assert!(run_bench(&c).is_err());
    }
}
