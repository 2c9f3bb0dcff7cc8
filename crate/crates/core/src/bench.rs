//! Wall-clock and memory accounting: time-to-first-token, decode
//! throughput, and KV-cache footprint.
//!
//! Protocol: one untimed warm-up run, then at least three timed repeats;
//! the median is reported alongside min and max. Timed sections include all
//! ranking and scoring work, so compressed prefills pay for their own
//! selection overhead. Cache bytes assume 4-byte (f32) elements.

use std::time::Instant;

use crate::model::{Model, TokenSequence};
use crate::pipelines::{decode, run_pipeline, Method, PipelineConfig, PipelineError, PrefillResult};

/// Errors raised by the measurement protocol.
#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("repeats must be >= 3, got {repeats}")]
    TooFewRepeats { repeats: usize },
    #[error("decode measurement needs >= 16 steps, got {steps}")]
    TooFewSteps { steps: usize },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// Timing samples of one measured quantity, milliseconds.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TimingStats {
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub samples_ms: Vec<f64>,
}

impl TimingStats {
    fn from_samples(mut samples: Vec<f64>) -> Self {
        samples.sort_by(|a, b| a.total_cmp(b));
        let n = samples.len();
        let median_ms = if n % 2 == 1 {
            samples[n / 2]
        } else {
            (samples[n / 2 - 1] + samples[n / 2]) / 2.0
        };
        Self {
            median_ms,
            min_ms: samples[0],
            max_ms: samples[n - 1],
            samples_ms: samples,
        }
    }
}

/// One method's measured row: prefill latency, decode throughput, cache
/// footprint.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BenchReport {
    pub method: Method,
    pub prompt_len: usize,
    pub keep_rate: f64,
    pub repeats: usize,
    pub ttft: TimingStats,
    /// Decode throughput in tokens/second (median across repeats); absent
    /// when decode was not measured.
    pub decode_tps: Option<f64>,
    pub decode_steps: Option<usize>,
    /// Cache footprint at decode start.
    pub cache_bytes: u64,
    /// Element width the byte count assumes.
    pub bytes_per_element: usize,
}

impl BenchReport {
    /// Header for the plot-ready CSV format (one row per method/rate).
    pub fn csv_header() -> &'static str {
        "method,prompt_len,keep_rate,repeats,ttft_median_ms,ttft_min_ms,ttft_max_ms,decode_tps,cache_bytes"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.method,
            self.prompt_len,
            self.keep_rate,
            self.repeats,
            self.ttft.median_ms,
            self.ttft.min_ms,
            self.ttft.max_ms,
            self.decode_tps.map_or(String::new(), |t| t.to_string()),
            self.cache_bytes,
        )
    }
}

/// Total cache footprint: for every layer and KV group, key and value rows
/// at 4 bytes per element — `sum_layers 2 * G * len_l * d_k * 4` when all
/// groups of a layer hold the same row count.
pub fn kv_cache_bytes(kv: &crate::model::KvCache) -> u64 {
    kv.layers
        .iter()
        .flat_map(|layer| layer.groups.iter())
        .map(|g| 4 * (g.keys.len() + g.values.len()) as u64)
        .sum()
}

/// Measures time-to-first-token: wall time from prompt submission to the
/// first next-token logits, ranking and scoring included. One untimed
/// warm-up run precedes `repeats >= 3` timed runs; the last timed run's
/// result is returned for reuse (all runs are deterministic).
pub fn measure_ttft(
    model: &Model,
    prompt: &TokenSequence,
    cfg: &PipelineConfig<'_>,
    repeats: usize,
) -> Result<(TimingStats, PrefillResult), BenchError> {
    if repeats < 3 {
        return Err(BenchError::TooFewRepeats { repeats });
    }
    let mut result = run_pipeline(model, prompt, cfg, None)?; // warm-up
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let started = Instant::now();
        result = run_pipeline(model, prompt, cfg, None)?;
        samples.push(started.elapsed().as_secs_f64() * 1e3);
    }
    Ok((TimingStats::from_samples(samples), result))
}

/// Measures decode throughput: `steps / wall-time` of a greedy decode loop
/// over a fresh clone of the prefill result, median across `repeats >= 3`
/// timed runs after one warm-up. Requires `steps >= 16` so per-step
/// overhead amortizes.
pub fn measure_decode_tps(
    model: &Model,
    result: &PrefillResult,
    steps: usize,
    repeats: usize,
) -> Result<f64, BenchError> {
    if steps < 16 {
        return Err(BenchError::TooFewSteps { steps });
    }
    if repeats < 3 {
        return Err(BenchError::TooFewRepeats { repeats });
    }
    let mut warm = result.clone();
    decode(model, &mut warm, steps)?;
    let mut tps = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let mut fresh = result.clone();
        let started = Instant::now();
        decode(model, &mut fresh, steps)?;
        tps.push(steps as f64 / started.elapsed().as_secs_f64());
    }
    tps.sort_by(|a, b| a.total_cmp(b));
    let n = tps.len();
    Ok(if n % 2 == 1 {
        tps[n / 2]
    } else {
        (tps[n / 2 - 1] + tps[n / 2]) / 2.0
    })
}

/// Runs the full measurement protocol for one method: TTFT, optional
/// decode throughput, cache bytes.
pub fn bench_method(
    model: &Model,
    prompt: &TokenSequence,
    cfg: &PipelineConfig<'_>,
    keep_rate: f64,
    repeats: usize,
    decode_steps: Option<usize>,
) -> Result<BenchReport, BenchError> {
    let (ttft, result) = measure_ttft(model, prompt, cfg, repeats)?;
    let decode_tps = decode_steps
        .map(|steps| measure_decode_tps(model, &result, steps, repeats))
        .transpose()?;
    Ok(BenchReport {
        method: cfg.method,
        prompt_len: prompt.len(),
        keep_rate,
        repeats,
        ttft,
        decode_tps,
        decode_steps,
        cache_bytes: kv_cache_bytes(&result.kv),
        bytes_per_element: 4,
    })
}
