//! Keep-rate sweep: runs every (prompt, method, keep-rate) cell, recording
//! ranking correlation against the oracle, retrieval score where the
//! prompt carries an expected answer, prefill latency, cache bytes, and a
//! programmatic architecture-contract check per cell.

use std::collections::BTreeMap;

use super::{spearman_rho, EvalError};
use crate::bench::kv_cache_bytes;
use crate::model::{Model, TokenSequence};
use crate::pipelines::{
    decode, oracle_ranking, run_pipeline, Method, PipelineConfig, PrefillResult,
};
use crate::ranking::{keep_count, ImportanceScores, RankingParams};

/// One prompt entering the sweep grid, optionally with the answer a
/// retrieval task expects.
#[derive(Debug, Clone)]
pub struct SweepPrompt {
    pub id: String,
    pub seq: TokenSequence,
    /// Expected answer tokens; presence turns on decode + exact-match
    /// scoring for this prompt's cells.
    pub expected: Option<Vec<u32>>,
}

impl SweepPrompt {
    pub fn plain(id: impl Into<String>, tokens: Vec<u32>) -> Self {
        Self {
            id: id.into(),
            seq: TokenSequence::new(tokens),
            expected: None,
        }
    }

    pub fn from_niah(id: impl Into<String>, task: &super::NiahTask) -> Self {
        Self {
            id: id.into(),
            seq: task.prompt(),
            expected: Some(task.expected.clone()),
        }
    }
}

/// Sweep-wide settings beyond the grid axes.
#[derive(Debug, Clone)]
pub struct SweepConfig<'a> {
    pub params: RankingParams,
    pub speculator: Option<&'a Model>,
    /// End-of-sequence id for oracle generation; `None` generates the full
    /// `n_gen` budget.
    pub eos_id: Option<u32>,
    /// Extra decode steps beyond the expected answer length for retrieval
    /// scoring.
    pub decode_margin: usize,
}

impl<'a> SweepConfig<'a> {
    pub fn new(params: RankingParams) -> Self {
        Self {
            params,
            speculator: None,
            eos_id: None,
            decode_margin: 4,
        }
    }
}

/// One grid cell's outcome. A failed cell keeps its coordinates and carries
/// the error; measured fields stay empty.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SweepCell {
    pub prompt_id: String,
    pub method: Method,
    /// Effective keep rate: the baseline always records 1.0.
    pub keep_rate: f64,
    pub kept_count: Option<usize>,
    /// Binary retrieval score, for prompts with an expected answer.
    pub retrieval_score: Option<u32>,
    /// Spearman ρ of the method's selection scores against the oracle
    /// ranking; absent for the baseline and when the oracle is undefined.
    pub rho_at_lp: Option<f64>,
    /// Single-run prefill wall time (medians live in the bench layer).
    pub ttft_ms: Option<f64>,
    pub cache_bytes: Option<u64>,
    pub architecture_ok: Option<bool>,
    pub error: Option<String>,
}

/// Report metadata: the resolved parameters plus measurement caveats.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SweepMetadata {
    pub params: RankingParams,
    /// The same pooling kernel is applied to heuristic and oracle scores
    /// before correlation.
    pub pooling_applied_to_both: bool,
    /// Field names that vary across reruns (everything else is
    /// deterministic for a fixed seed).
    pub timing_fields: Vec<String>,
}

/// Complete sweep output: every cell of the grid plus per-prompt oracle
/// failures.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SweepReport {
    pub metadata: SweepMetadata,
    pub cells: Vec<SweepCell>,
    /// Prompts whose oracle ranking failed (e.g. empty generation), with
    /// the error text; their cells carry no ρ.
    pub oracle_errors: BTreeMap<String, String>,
}

impl SweepReport {
    pub fn any_cell_failed(&self) -> bool {
        self.cells.iter().any(|c| c.error.is_some())
    }

    /// CSV emission, one row per cell.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "prompt",
            "method",
            "keep_rate",
            "kept_count",
            "retrieval_score",
            "rho_at_lp",
            "ttft_ms",
            "cache_bytes",
            "architecture_ok",
            "error",
        ])?;
        let opt = |o: Option<String>| o.unwrap_or_default();
        for c in &self.cells {
            wtr.write_record([
                c.prompt_id.clone(),
                c.method.name().to_string(),
                c.keep_rate.to_string(),
                opt(c.kept_count.map(|v| v.to_string())),
                opt(c.retrieval_score.map(|v| v.to_string())),
                opt(c.rho_at_lp.map(|v| v.to_string())),
                opt(c.ttft_ms.map(|v| v.to_string())),
                opt(c.cache_bytes.map(|v| v.to_string())),
                opt(c.architecture_ok.map(|v| v.to_string())),
                c.error.clone().unwrap_or_default(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Checks the structural cache contracts a finished prefill must satisfy
/// for its method: per-layer cache lengths, index-set uniformity, deferred
/// full-length layers, and forced-window survival. Returns the first
/// violation as text.
pub fn validate_architecture(
    method: Method,
    result: &PrefillResult,
    params: &RankingParams,
    prompt_len: usize,
) -> Result<(), String> {
    let l = prompt_len;
    let rate = if method == Method::FullKv {
        1.0
    } else {
        params.keep_rate
    };
    let keep = keep_count(rate, l).map_err(|e| e.to_string())?;
    let kept = &result.kept_indices;

    if kept.windows(2).any(|w| w[0] >= w[1]) {
        return Err("kept_indices not strictly ascending".into());
    }
    if kept.last().is_some_and(|&i| i >= l) {
        return Err("kept index out of prompt range".into());
    }
    if kept.len() != keep {
        return Err(format!("kept {} tokens, expected {}", kept.len(), keep));
    }

    let full: Vec<usize> = (0..l).collect();
    let check_layer = |idx: usize, expect: &[usize]| -> Result<(), String> {
        for (g, group) in result.kv.layers[idx].groups.iter().enumerate() {
            if group.positions != expect {
                return Err(format!(
                    "layer {idx} group {g}: cache rows deviate from the expected index set"
                ));
            }
        }
        Ok(())
    };
    let check_len = |idx: usize, expect: usize| -> Result<(), String> {
        for (g, group) in result.kv.layers[idx].groups.iter().enumerate() {
            if group.len() != expect {
                return Err(format!(
                    "layer {idx} group {g}: {} cache rows, expected {expect}",
                    group.len()
                ));
            }
        }
        Ok(())
    };

    let num_layers = result.kv.layers.len();
    match method {
        Method::FullKv => {
            for i in 0..num_layers {
                check_layer(i, &full)?;
            }
        }
        Method::GemFilter | Method::SpecPrefill | Method::Oracle2Pass => {
            for i in 0..num_layers {
                check_layer(i, kept)?;
            }
            if method == Method::GemFilter && !kept.contains(&(l - 1)) {
                return Err("last token missing from kept set".into());
            }
        }
        Method::OracleEmulated => {
            // one shared index set everywhere
            for i in 0..num_layers {
                check_layer(i, kept)?;
            }
        }
        Method::FastKv => {
            for i in 0..num_layers {
                if i <= params.l_p {
                    check_len(i, keep)?;
                } else {
                    check_layer(i, kept)?;
                }
            }
            check_forced_window(kept, params, l, keep)?;
        }
        Method::Claa => {
            for i in 0..num_layers {
                if i < params.m {
                    check_layer(i, &full)?;
                } else if i <= params.l_p {
                    check_len(i, keep)?;
                } else {
                    check_layer(i, kept)?;
                }
            }
            check_forced_window(kept, params, l, keep)?;
        }
    }
    Ok(())
}

fn check_forced_window(
    kept: &[usize],
    params: &RankingParams,
    l: usize,
    keep: usize,
) -> Result<(), String> {
    let f = params.w.min(keep);
    for i in l - f..l {
        if !kept.contains(&i) {
            return Err(format!("forced window position {i} missing from kept set"));
        }
    }
    Ok(())
}

struct CellSpec<'a> {
    prompt: &'a SweepPrompt,
    method: Method,
    keep_rate: f64,
}

/// Runs the full grid. Configuration problems (invalid params, missing
/// speculator) fail the whole sweep; anything that goes wrong inside a
/// single cell is recorded in that cell and the sweep continues.
pub fn sweep(
    model: &Model,
    prompts: &[SweepPrompt],
    methods: &[Method],
    keep_rates: &[f64],
    cfg: &SweepConfig<'_>,
) -> Result<SweepReport, EvalError> {
    if prompts.is_empty() {
        return Err(EvalError::EmptyGrid("no prompts"));
    }
    if methods.is_empty() {
        return Err(EvalError::EmptyGrid("no methods"));
    }
    if keep_rates.is_empty() {
        return Err(EvalError::EmptyGrid("no keep rates"));
    }
    cfg.params
        .validate(model.config.num_layers)
        .map_err(crate::pipelines::PipelineError::from)?;
    if methods.contains(&Method::SpecPrefill) && cfg.speculator.is_none() {
        return Err(crate::pipelines::PipelineError::MissingSpeculator.into());
    }
    for &rate in keep_rates {
        keep_count(rate, 1).map_err(crate::pipelines::PipelineError::from)?;
    }

    // one oracle ranking per prompt, shared across its cells
    let mut oracles: BTreeMap<&str, Result<ImportanceScores, String>> = BTreeMap::new();
    for p in prompts {
        let r = oracle_ranking(model, &p.seq, &cfg.params, cfg.eos_id).map_err(|e| e.to_string());
        oracles.insert(&p.id, r);
    }

    let mut specs = Vec::with_capacity(prompts.len() * methods.len() * keep_rates.len());
    for prompt in prompts {
        for &method in methods {
            for &keep_rate in keep_rates {
                specs.push(CellSpec {
                    prompt,
                    method,
                    keep_rate,
                });
            }
        }
    }

    let run_one = |spec: &CellSpec<'_>| -> SweepCell {
        let oracle = oracles[spec.prompt.id.as_str()].as_ref().ok();
        run_cell(model, spec, cfg, oracle)
    };
    #[cfg(feature = "parallel")]
    let cells: Vec<SweepCell> = {
        use rayon::prelude::*;
        specs.par_iter().map(run_one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let cells: Vec<SweepCell> = specs.iter().map(run_one).collect();

    let oracle_errors = oracles
        .iter()
        .filter_map(|(id, r)| r.as_ref().err().map(|e| (id.to_string(), e.clone())))
        .collect();

    Ok(SweepReport {
        metadata: SweepMetadata {
            params: cfg.params.clone(),
            pooling_applied_to_both: true,
            timing_fields: vec!["ttft_ms".to_string()],
        },
        cells,
        oracle_errors,
    })
}

fn run_cell(
    model: &Model,
    spec: &CellSpec<'_>,
    cfg: &SweepConfig<'_>,
    oracle: Option<&ImportanceScores>,
) -> SweepCell {
    let effective_rate = if spec.method == Method::FullKv {
        1.0
    } else {
        spec.keep_rate
    };
    let params = RankingParams {
        keep_rate: effective_rate,
        ..cfg.params.clone()
    };
    let mut cell = SweepCell {
        prompt_id: spec.prompt.id.clone(),
        method: spec.method,
        keep_rate: effective_rate,
        kept_count: None,
        retrieval_score: None,
        rho_at_lp: None,
        ttft_ms: None,
        cache_bytes: None,
        architecture_ok: None,
        error: None,
    };
    let mut pipe_cfg = PipelineConfig::new(spec.method, params.clone());
    pipe_cfg.speculator = cfg.speculator;
    let mut result = match run_pipeline(model, &spec.prompt.seq, &pipe_cfg, oracle) {
        Ok(r) => r,
        Err(e) => {
            cell.error = Some(e.to_string());
            return cell;
        }
    };

    cell.kept_count = Some(result.kept_indices.len());
    cell.ttft_ms = Some(result.wall_time.as_secs_f64() * 1e3);
    cell.cache_bytes = Some(kv_cache_bytes(&result.kv));
    match validate_architecture(spec.method, &result, &params, spec.prompt.seq.len()) {
        Ok(()) => cell.architecture_ok = Some(true),
        Err(msg) => {
            cell.architecture_ok = Some(false);
            cell.error = Some(msg);
        }
    }
    if let (Some(sel), Some(orc)) = (&result.selection_scores, oracle) {
        match spearman_rho(sel, orc) {
            Ok(rho) => cell.rho_at_lp = Some(rho),
            Err(e) => {
                cell.error = Some(format!("rank correlation failed: {e}"));
            }
        }
    }
    if let Some(expected) = &spec.prompt.expected {
        let steps = expected.len() + cfg.decode_margin;
        match decode(model, &mut result, steps) {
            Ok(tokens) => {
                cell.retrieval_score = Some(super::score_exact_match(&tokens, expected));
            }
            Err(e) => cell.error = Some(format!("decode failed: {e}")),
        }
    }
    cell
}
