//! Wall-clock scaling of one masked global-attention layer versus the number
//! of frames.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::kernel::{layout_attention, AttentionLayout};
use crate::attention::mask::{build_mask, MaskStrategy};
use crate::attention::stats::attn_stats;
use crate::autodiff::Tensor;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n_frames: usize,
    pub strategy: MaskStrategy,
    pub kept_pairs: usize,
    pub dense_pairs: usize,
    pub wall_time_ms: f64,
    /// Largest number of key tokens any query token attends to.
    pub peak_tokens: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub n_frames: Vec<usize>,
    pub strategies: Vec<MaskStrategy>,
    pub tokens_per_frame: usize,
    pub d_model: usize,
    pub heads: usize,
    pub dilation: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_frames: vec![16, 32, 64, 128, 256],
            strategies: MaskStrategy::ALL.to_vec(),
            tokens_per_frame: 16,
            d_model: 64,
            heads: 4,
            dilation: crate::attention::DEFAULT_DILATION,
            repeats: 3,
            seed: 0,
        }
    }
}

fn median(mut xs: Vec<Duration>) -> Duration {
    xs.sort();
    xs[(xs.len() - 1) / 2]
}

/// Times one attention layer per `(N, strategy)`: one discarded warmup run,
/// then the median of `repeats` timed runs. Anchor is frame 0, query frame
/// `N − 1`. Runs are sequential.
pub fn bench_attention(config: &BenchConfig) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rows = Vec::new();
    for &n in &config.n_frames {
        let tokens = n * config.tokens_per_frame;
        let q = Tensor::randn(&mut rng, tokens, config.d_model, 1.0);
        let k = Tensor::randn(&mut rng, tokens, config.d_model, 1.0);
        let v = Tensor::randn(&mut rng, tokens, config.d_model, 1.0);
        for &strategy in &config.strategies {
            let mask = build_mask(strategy, n, 0, n - 1, config.dilation)?;
            let layout = AttentionLayout::from_mask(&mask, config.tokens_per_frame);
            let stats = attn_stats(&mask, config.tokens_per_frame, config.d_model);
            layout_attention(&q, &k, &v, &layout, config.heads)?;
            let mut times = Vec::with_capacity(config.repeats.max(1));
            for _ in 0..config.repeats.max(1) {
                let start = Instant::now();
                let out = layout_attention(&q, &k, &v, &layout, config.heads)?;
                times.push(start.elapsed());
                std::hint::black_box(out);
            }
            let peak = mask.rows().iter().map(Vec::len).max().unwrap_or(0) * config.tokens_per_frame;
            rows.push(BenchRow {
                n_frames: n,
                strategy,
                kept_pairs: stats.kept_pairs,
                dense_pairs: stats.dense_pairs,
                wall_time_ms: median(times).as_secs_f64() * 1e3,
                peak_tokens: peak,
            });
        }
    }
    Ok(rows)
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| std::io::Error::other(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Least-squares slope of `ln(time)` against `ln(N)`.
pub fn scaling_exponent(points: &[(usize, f64)]) -> f64 {
    let xs: Vec<f64> = points.iter().map(|(n, _)| (*n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, t)| t.ln()).collect();
    linear_fit(&xs, &ys).0
}

/// Ordinary least squares `(slope, intercept)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}
