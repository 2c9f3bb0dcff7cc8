//! Oracle-referenced evaluation: rank correlation, per-layer ranking
//! curves, synthetic retrieval tasks, and keep-rate sweeps.

mod niah;
mod sweep;

pub use niah::{gen_niah, score_exact_match, NiahTask};
pub use sweep::{
    sweep, validate_architecture, SweepCell, SweepConfig, SweepPrompt, SweepReport,
};

use std::collections::BTreeMap;

use crate::model::{greedy_generate, run_prefill, EngineOptions, Model, NoopObserver,
    TokenSequence};
use crate::pipelines::PipelineError;
use crate::ranking::{
    claa_aggregate, gemfilter_score, oracle_score, pool1d, window_score, ImportanceScores,
    LayerScoreBuffer, RankingParams,
};

/// Errors raised by the evaluation layer.
#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("score length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("need at least 2 scores, got {len}")]
    TooShort { len: usize },
    #[error("degenerate ranking: zero rank variance")]
    DegenerateRanking,
    #[error("non-finite score at index {index}")]
    NonFinite { index: usize },
    #[error("depth {depth} outside [0, 1]")]
    DepthOutOfRange { depth: f64 },
    #[error("length {len} too short for needle plus query ({need})")]
    PromptTooShort { len: usize, need: usize },
    #[error("vocab size {vocab} too small for reserved marker tokens")]
    VocabTooSmall { vocab: usize },
    #[error("empty grid: {0}")]
    EmptyGrid(&'static str),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Rank(#[from] crate::ranking::RankError),
}

/// Average ranks (1-based); tied values share the mean of their positions.
fn average_ranks(values: &[f32]) -> Result<Vec<f64>, EvalError> {
    if let Some((i, _)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(EvalError::NonFinite { index: i });
    }
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &ix in &order[i..=j] {
            ranks[ix] = avg;
        }
        i = j + 1;
    }
    Ok(ranks)
}

/// Spearman rank correlation with average ranks for ties: the Pearson
/// correlation of the two rank vectors. Errors on mismatched lengths,
/// fewer than two entries, or a constant input ("degenerate ranking").
pub fn spearman_rho(a: &ImportanceScores, b: &ImportanceScores) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(EvalError::TooShort { len: a.len() });
    }
    let ra = average_ranks(&a.values)?;
    let rb = average_ranks(&b.values)?;
    let n = ra.len() as f64;
    let mean = (n + 1.0) / 2.0; // ranks always average to (n+1)/2
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        let dx = x - mean;
        let dy = y - mean;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::DegenerateRanking);
    }
    // identical or exactly antithetic rank vectors are the two boundary
    // cases; return them exactly to keep self- and reversal-correlation
    // free of rounding
    if ra == rb {
        return Ok(1.0);
    }
    if ra
        .iter()
        .zip(&rb)
        .all(|(x, y)| x + y == n + 1.0)
    {
        return Ok(-1.0);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// One method's layer-wise correlation curve against the oracle.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RankCorrelationReport {
    pub method: String,
    pub prompt_id: String,
    /// Layer index → Spearman ρ against the oracle ranking. Layers where
    /// the method is undefined (cross-layer aggregation before its buffer
    /// fills) are absent.
    pub rho_by_layer: BTreeMap<usize, f64>,
}

/// Computes every heuristic's ranking quality at every layer, treating each
/// layer in turn as the heuristic's ranking layer: the last-token query
/// score at layer `l`, the window score at `l`, and the cross-layer
/// aggregate over the `n` window scores ending at `l` (defined only for
/// `l >= m + n - 1`). The same pooling kernel is applied to heuristic and
/// oracle scores alike; the oracle's own curve is the self-correlation 1.
pub fn layerwise_correlation(
    model: &Model,
    prompt: &TokenSequence,
    prompt_id: &str,
    params: &RankingParams,
    eos_id: Option<u32>,
) -> Result<Vec<RankCorrelationReport>, EvalError> {
    let num_layers = model.config.num_layers;
    let all_layers: Vec<usize> = (0..num_layers).collect();
    let out = run_prefill(
        model,
        prompt,
        &all_layers,
        &mut NoopObserver,
        None,
        EngineOptions::default(),
    )
    .map_err(PipelineError::from)?;
    let mut cache = out.cache;
    let answer = greedy_generate(model, &mut cache, &out.last_logits, params.n_gen, eos_id)
        .map_err(PipelineError::from)?;
    let oracle = oracle_score(&out.trace, &answer, params.pool_kernel)?;

    let report = |method: &str| RankCorrelationReport {
        method: method.to_string(),
        prompt_id: prompt_id.to_string(),
        rho_by_layer: BTreeMap::new(),
    };
    let mut gem = report("gemfilter");
    let mut win = report("fastkv");
    let mut agg = report("claa");
    let mut orc = report("oracle");

    let mut buffer = LayerScoreBuffer::new(params.n);
    for l in 0..num_layers {
        let g = pool1d(&gemfilter_score(&out.trace, l)?, params.pool_kernel)?;
        gem.rho_by_layer.insert(l, spearman_rho(&g, &oracle)?);

        let w_raw = window_score(&out.trace, l, params.w)?;
        let w = pool1d(&w_raw, params.pool_kernel)?;
        win.rho_by_layer.insert(l, spearman_rho(&w, &oracle)?);

        if l >= params.m {
            buffer.push(w_raw);
            if l >= params.m + params.n - 1 {
                let a = pool1d(&claa_aggregate(&buffer)?, params.pool_kernel)?;
                agg.rho_by_layer.insert(l, spearman_rho(&a, &oracle)?);
            }
        }

        orc.rho_by_layer
            .insert(l, spearman_rho(&oracle, &oracle)?);
    }
    Ok(vec![gem, win, agg, orc])
}

/// Writes layer-wise reports as CSV rows `prompt,method,layer,rho`.
pub fn write_correlation_csv<W: std::io::Write>(
    reports: &[RankCorrelationReport],
    w: W,
) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["prompt", "method", "layer", "rho"])?;
    for r in reports {
        for (layer, rho) in &r.rho_by_layer {
            wtr.write_record([
                r.prompt_id.clone(),
                r.method.clone(),
                layer.to_string(),
                rho.to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Mean ρ per (method, layer) across prompts, for the summary file.
pub fn correlation_summary(
    reports: &[RankCorrelationReport],
) -> BTreeMap<String, BTreeMap<usize, f64>> {
    let mut sums: BTreeMap<String, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for r in reports {
        let per_method = sums.entry(r.method.clone()).or_default();
        for (&layer, &rho) in &r.rho_by_layer {
            let cell = per_method.entry(layer).or_insert((0.0, 0));
            cell.0 += rho;
            cell.1 += 1;
        }
    }
    sums.into_iter()
        .map(|(m, layers)| {
            (
                m,
                layers
                    .into_iter()
                    .map(|(l, (sum, count))| (l, sum / count as f64))
                    .collect(),
            )
        })
        .collect()
}
