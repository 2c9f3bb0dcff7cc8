//! End-to-end prefill architectures: the full-KV baseline, three heuristic
//! pruning pipelines (last-token two-pass, per-layer single-pass,
//! speculative lookahead), the answer-informed oracle in both two-pass and
//! single-pass-emulated form, and cross-layer aggregation — plus greedy
//! decode over the resulting (possibly compressed) caches.
//!
//! Two execution shapes exist:
//!
//! * **Two-pass** (last-token, speculative, oracle): rank first, then rerun
//!   a full forward over only the kept tokens with their original position
//!   ids. The cache index set is identical at every layer.
//! * **Single-pass** (per-layer, cross-layer, oracle-emulated): one forward
//!   pass that compresses each layer's stored cache in flight while full
//!   hidden states keep propagating; at the pruning layer `l_p` the hidden
//!   sequence itself shrinks and later layers run reduced.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use crate::model::{
    argmax_lowest, decode_step, greedy_generate, run_prefill, CacheKeep, Directive,
    EngineOptions, KvCache, LayerCtx, LayerObserver, Model, ModelError, NoopObserver,
    PrefillOutput, TokenSequence,
};
use crate::ranking::{
    claa_aggregate, gemfilter_score, keep_count, kv_group_score_layer, oracle_score, pool1d,
    spec_prefill_score, topk_indices, window_score_layer, ImportanceScores, LayerScoreBuffer,
    RankError, RankingParams,
};

/// Errors raised by the prefill pipelines.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Rank(#[from] RankError),
    #[error("speculative prefill requires a speculator model")]
    MissingSpeculator,
    #[error("vocab mismatch: base {base}, speculator {spec}")]
    VocabMismatch { base: usize, spec: usize },
    #[error("score length {actual} does not match prompt length {expected}")]
    ScoreLength { expected: usize, actual: usize },
}

/// The prefill strategies under study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Method {
    /// Uncompressed baseline.
    #[serde(rename = "full-kv")]
    FullKv,
    /// Two-pass, ranked by the last token's query at layer `r`.
    #[serde(rename = "gemfilter")]
    GemFilter,
    /// Single-pass, per-layer per-group cache compression, pruning at `l_p`.
    #[serde(rename = "fastkv")]
    FastKv,
    /// Two-pass, ranked by a speculator's lookahead queries.
    #[serde(rename = "spec-prefill")]
    SpecPrefill,
    /// Two-pass on precomputed answer-informed oracle scores.
    #[serde(rename = "oracle")]
    Oracle2Pass,
    /// Single-pass mirror of the oracle: one shared index set compresses
    /// every layer up to `l_p`.
    #[serde(rename = "oracle-emulated")]
    OracleEmulated,
    /// Single-pass with cross-layer max-aggregation over the last `n`
    /// layer scores, compression deferred until layer `m`.
    #[serde(rename = "claa")]
    Claa,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::FullKv,
        Method::GemFilter,
        Method::FastKv,
        Method::SpecPrefill,
        Method::Oracle2Pass,
        Method::OracleEmulated,
        Method::Claa,
    ];

    /// Stable kebab-case name used in CLI flags, file paths, and reports.
    pub fn name(self) -> &'static str {
        match self {
            Method::FullKv => "full-kv",
            Method::GemFilter => "gemfilter",
            Method::FastKv => "fastkv",
            Method::SpecPrefill => "spec-prefill",
            Method::Oracle2Pass => "oracle",
            Method::OracleEmulated => "oracle-emulated",
            Method::Claa => "claa",
        }
    }

    /// Inverse of [`Method::name`].
    pub fn from_name(name: &str) -> Option<Method> {
        Method::ALL.iter().copied().find(|m| m.name() == name)
    }

    /// Rank-then-rerun methods: cache index sets are uniform across layers.
    pub fn is_two_pass(self) -> bool {
        matches!(
            self,
            Method::GemFilter | Method::SpecPrefill | Method::Oracle2Pass
        )
    }

    /// In-flight compression methods: per-layer index sets may differ
    /// below `l_p`.
    pub fn is_single_pass(self) -> bool {
        matches!(
            self,
            Method::FastKv | Method::OracleEmulated | Method::Claa
        )
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::from_name(s).ok_or_else(|| {
            let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
            format!("unknown method '{s}'; valid: {}", names.join(", "))
        })
    }
}

/// Configuration of one pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineConfig<'a> {
    pub method: Method,
    pub params: RankingParams,
    /// Lookahead model for [`Method::SpecPrefill`].
    pub speculator: Option<&'a Model>,
}

impl<'a> PipelineConfig<'a> {
    pub fn new(method: Method, params: RankingParams) -> Self {
        Self {
            method,
            params,
            speculator: None,
        }
    }

    /// Checks the parameters against the target model and the method's
    /// structural requirements.
    pub fn validate(&self, model: &Model) -> Result<(), PipelineError> {
        self.params.validate(model.config.num_layers)?;
        if self.method == Method::SpecPrefill {
            let spec = self.speculator.ok_or(PipelineError::MissingSpeculator)?;
            if spec.config.vocab_size != model.config.vocab_size {
                return Err(PipelineError::VocabMismatch {
                    base: model.config.vocab_size,
                    spec: spec.config.vocab_size,
                });
            }
        }
        Ok(())
    }
}

/// Output of one prefill: everything needed to start decoding plus the
/// bookkeeping the evaluation layer consumes.
#[derive(Debug, Clone)]
pub struct PrefillResult {
    /// Logits predicting the first decode token, `[vocab]`.
    pub next_logits: Vec<f32>,
    pub kv: KvCache,
    /// Prompt indices that survived pruning, ascending. Full length for
    /// the baseline.
    pub kept_indices: Vec<usize>,
    /// Per-layer scores, for methods that derive them in-pass.
    pub per_layer_scores: Option<BTreeMap<usize, ImportanceScores>>,
    /// The (pooled) score vector that actually drove `kept_indices`; absent
    /// for the baseline. Evaluation correlates this against the oracle.
    pub selection_scores: Option<ImportanceScores>,
    /// Wall-clock duration of the whole prefill, ranking included.
    pub wall_time: Duration,
}

/// JSON-serializable digest of a [`PrefillResult`].
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PrefillSummary {
    pub method: Method,
    pub keep_rate: f64,
    pub prompt_len: usize,
    pub kept_count: usize,
    pub kept_indices: Vec<usize>,
    pub prefill_ms: f64,
    pub cache_bytes_per_layer: Vec<u64>,
    pub cache_bytes_total: u64,
}

impl PrefillResult {
    pub fn summary(&self, method: Method, keep_rate: f64, prompt_len: usize) -> PrefillSummary {
        let per_layer: Vec<u64> = self
            .kv
            .layers
            .iter()
            .map(|layer| {
                layer
                    .groups
                    .iter()
                    .map(|g| 4 * (g.keys.len() + g.values.len()) as u64)
                    .sum()
            })
            .collect();
        let total = per_layer.iter().sum();
        PrefillSummary {
            method,
            keep_rate,
            prompt_len,
            kept_count: self.kept_indices.len(),
            kept_indices: self.kept_indices.clone(),
            prefill_ms: self.wall_time.as_secs_f64() * 1e3,
            cache_bytes_per_layer: per_layer,
            cache_bytes_total: total,
        }
    }
}

/// Builds the final result, pinning the cache's logical length to the
/// original prompt so decode positions continue from the full length even
/// when late prompt tokens were pruned away.
fn finish(
    out: PrefillOutput,
    prompt: &TokenSequence,
    kept_indices: Vec<usize>,
    per_layer_scores: Option<BTreeMap<usize, ImportanceScores>>,
    selection_scores: Option<ImportanceScores>,
    started: Instant,
) -> PrefillResult {
    // when the engine pruned the running sequence it must have ended on
    // exactly the kept tokens' positions (cache-only methods keep all rows)
    debug_assert!(
        out.final_positions.len() != kept_indices.len()
            || out
                .final_positions
                .iter()
                .zip(kept_indices.iter())
                .all(|(&p, &i)| p == prompt.position_ids[i])
    );
    let mut kv = out.cache;
    kv.seq_len = prompt.position_ids.last().map_or(0, |&p| p + 1);
    PrefillResult {
        next_logits: out.last_logits,
        kv,
        kept_indices,
        per_layer_scores,
        selection_scores,
        wall_time: started.elapsed(),
    }
}

/// Uncompressed baseline prefill: full cache, all tokens kept.
pub fn full_prefill(model: &Model, prompt: &TokenSequence) -> Result<PrefillResult, PipelineError> {
    let started = Instant::now();
    let out = run_prefill(
        model,
        prompt,
        &[],
        &mut NoopObserver,
        None,
        EngineOptions::default(),
    )?;
    let kept = (0..prompt.len()).collect();
    Ok(finish(out, prompt, kept, None, None, started))
}

/// Two-pass prefill ranked by the final prompt token's query at layer `r`.
///
/// Pass 1 runs layers `0..=r` only, scores every token by its raw
/// attention from the last token's query, pools, and selects top-k with
/// the last token force-included. Pass 2 reruns a full forward over the
/// kept tokens at their original position ids.
pub fn gemfilter_prefill(
    model: &Model,
    prompt: &TokenSequence,
    cfg: &PipelineConfig<'_>,
) -> Result<PrefillResult, PipelineError> {
    let p = &cfg.params;
    p.validate(model.config.num_layers)?;
    let started = Instant::now();
    let pass1 = run_prefill(
        model,
        prompt,
        &[p.r],
        &mut NoopObserver,
        None,
        EngineOptions {
            want_all_logits: false,
            stop_after_layer: Some(p.r),
        },
    )?;
    let pooled = pool1d(&gemfilter_score(&pass1.trace, p.r)?, p.pool_kernel)?;
    let k = keep_count(p.keep_rate, prompt.len())?;
    let kept = topk_indices(&pooled, k, Some(&[prompt.len() - 1]))?;
    let pruned = prompt.select(&kept);
    let out = run_prefill(
        model,
        &pruned,
        &[],
        &mut NoopObserver,
        None,
        EngineOptions::default(),
    )?;
    let scores = BTreeMap::from([(p.r, pooled.clone())]);
    Ok(finish(out, prompt, kept, Some(scores), Some(pooled), started))
}

/// Indices of the last `min(w, k)` positions of a length-`len` sequence —
/// the observation window that single-pass methods always retain.
fn window_force(len: usize, w: usize, k: usize) -> Vec<usize> {
    let f = w.min(k);
    (len - f..len).collect()
}

/// Single-pass observer: per-layer window ranking with per-group cache
/// compression at every layer, sequence pruning at `l_p`.
struct FastKvObserver {
    w: usize,
    l_p: usize,
    keep: usize,
    kernel: usize,
    num_groups: usize,
    scores: BTreeMap<usize, ImportanceScores>,
    kept: Option<Vec<usize>>,
    err: Option<RankError>,
}

impl FastKvObserver {
    fn rank(&mut self, ctx: &LayerCtx<'_>) -> Result<Directive, RankError> {
        let lt = ctx.trace.expect("trace requested for ranking layers");
        let force = window_force(lt.len, self.w, self.keep);
        let mut per_group = Vec::with_capacity(self.num_groups);
        for g in 0..self.num_groups {
            let gs = kv_group_score_layer(lt, ctx.layer, self.w, g)?;
            let pooled = pool1d(&gs, self.kernel)?;
            per_group.push(topk_indices(&pooled, self.keep, Some(&force))?);
        }
        let window = pool1d(&window_score_layer(lt, ctx.layer, self.w)?, self.kernel)?;
        let mut directive = Directive {
            cache_keep: Some(CacheKeep::PerGroup(per_group)),
            prune_to: None,
        };
        if ctx.layer == self.l_p {
            let sel = topk_indices(&window, self.keep, Some(&force))?;
            self.kept = Some(sel.clone());
            directive.prune_to = Some(sel);
        }
        self.scores.insert(ctx.layer, window);
        Ok(directive)
    }
}

impl LayerObserver for FastKvObserver {
    fn after_layer(&mut self, ctx: LayerCtx<'_>) -> Directive {
        if ctx.layer > self.l_p || self.err.is_some() {
            return Directive::default();
        }
        match self.rank(&ctx) {
            Ok(d) => d,
            Err(e) => {
                self.err = Some(e);
                Directive::default()
            }
        }
    }

    fn wants_trace(&self, layer: usize) -> bool {
        layer <= self.l_p && self.err.is_none()
    }
}

/// Single-pass prefill with per-layer, per-KV-group cache compression.
///
/// Every layer up to `l_p` compresses its own stored cache to `keep_count`
/// rows per group using that layer's window attention, while full hidden
/// states keep flowing. At `l_p` the hidden sequence itself is pruned by
/// the layer's (head-summed) window score and later layers run reduced.
pub fn fastkv_prefill(
    model: &Model,
    prompt: &TokenSequence,
    cfg: &PipelineConfig<'_>,
) -> Result<PrefillResult, PipelineError> {
    let p = &cfg.params;
    p.validate(model.config.num_layers)?;
    if p.w > prompt.len() {
        return Err(RankError::WindowTooLarge {
            w: p.w,
            len: prompt.len(),
        }
        .into());
    }
    let started = Instant::now();
    let mut obs = FastKvObserver {
        w: p.w,
        l_p: p.l_p,
        keep: keep_count(p.keep_rate, prompt.len())?,
        kernel: p.pool_kernel,
        num_groups: model.config.num_kv_heads,
        scores: BTreeMap::new(),
        kept: None,
        err: None,
    };
    let out = run_prefill(model, prompt, &[], &mut obs, None, EngineOptions::default())?;
    if let Some(e) = obs.err {
        return Err(e.into());
    }
    let kept = obs.kept.take().expect("pruning layer ran");
    let selection = obs.scores.get(&p.l_p).cloned();
    Ok(finish(out, prompt, kept, Some(obs.scores), selection, started))
}

/// Pooled speculative ranking: full-prefills the prompt on the speculator,
/// greedy-generates `k` lookahead tokens, and scores every prompt token by
/// its mean-over-lookahead max-over-(layer, head) raw attention.
pub fn speculative_ranking(
    spec: &Model,
    prompt: &TokenSequence,
    params: &RankingParams,
) -> Result<ImportanceScores, PipelineError> {
    let all_layers: Vec<usize> = (0..spec.config.num_layers).collect();
    let out = run_prefill(
        spec,
        prompt,
        &all_layers,
        &mut NoopObserver,
        None,
        EngineOptions::default(),
    )?;
    let mut cache = out.cache;
    let lookahead = greedy_generate(spec, &mut cache, &out.last_logits, params.k, None)?;
    let raw = spec_prefill_score(&out.trace, &lookahead)?;
    Ok(pool1d(&raw, params.pool_kernel)?)
}

/// Two-pass prefill ranked by a speculator's lookahead attention; the base
/// model then runs a full forward over the kept tokens only. Nothing is
/// force-included.
pub fn speculative_prefill(
    base: &Model,
    spec: &Model,
    prompt: &TokenSequence,
    cfg: &PipelineConfig<'_>,
) -> Result<PrefillResult, PipelineError> {
    let p = &cfg.params;
    p.validate(base.config.num_layers)?;
    if spec.config.vocab_size != base.config.vocab_size {
        return Err(PipelineError::VocabMismatch {
            base: base.config.vocab_size,
            spec: spec.config.vocab_size,
        });
    }
    let started = Instant::now();
    let scores = speculative_ranking(spec, prompt, p)?;
    let k = keep_count(p.keep_rate, prompt.len())?;
    let kept = topk_indices(&scores, k, None)?;
    let out = run_prefill(
        base,
        &prompt.select(&kept),
        &[],
        &mut NoopObserver,
        None,
        EngineOptions::default(),
    )?;
    Ok(finish(out, prompt, kept, None, Some(scores), started))
}

/// Answer-informed oracle ranking: full prefill, greedy generation of up to
/// `n_gen` tokens (stopping early at `eos_id` when given), then the pooled
/// mean-over-answer max-over-(layer, head) raw attention score.
///
/// Fails with "oracle undefined" when the model emits the end-of-sequence
/// token immediately.
pub fn oracle_ranking(
    model: &Model,
    prompt: &TokenSequence,
    params: &RankingParams,
    eos_id: Option<u32>,
) -> Result<ImportanceScores, PipelineError> {
    let all_layers: Vec<usize> = (0..model.config.num_layers).collect();
    let out = run_prefill(
        model,
        prompt,
        &all_layers,
        &mut NoopObserver,
        None,
        EngineOptions::default(),
    )?;
    let mut cache = out.cache;
    let answer = greedy_generate(model, &mut cache, &out.last_logits, params.n_gen, eos_id)?;
    Ok(oracle_score(&out.trace, &answer, params.pool_kernel)?)
}

fn check_score_len(scores: &ImportanceScores, prompt: &TokenSequence) -> Result<(), PipelineError> {
    if scores.len() != prompt.len() {
        return Err(PipelineError::ScoreLength {
            expected: prompt.len(),
            actual: scores.len(),
        });
    }
    Ok(())
}

/// Two-pass prefill on precomputed oracle scores (already pooled): top-k
/// selection, then a full forward over the kept tokens.
pub fn oracle_prefill(
    model: &Model,
    prompt: &TokenSequence,
    scores: &ImportanceScores,
    cfg: &PipelineConfig<'_>,
) -> Result<PrefillResult, PipelineError> {
    let p = &cfg.params;
    p.validate(model.config.num_layers)?;
    check_score_len(scores, prompt)?;
    let started = Instant::now();
    let k = keep_count(p.keep_rate, prompt.len())?;
    let kept = topk_indices(scores, k, None)?;
    let out = run_prefill(
        model,
        &prompt.select(&kept),
        &[],
        &mut NoopObserver,
        None,
        EngineOptions::default(),
    )?;
    Ok(finish(out, prompt, kept, None, Some(scores.clone()), started))
}

/// Single-pass observer applying one shared index set at every layer up to
/// `l_p`: cache compression below, cache compression plus sequence pruning
/// at `l_p`. Needs no attention traces at all.
struct SharedSetObserver {
    l_p: usize,
    kept: Vec<usize>,
}

impl LayerObserver for SharedSetObserver {
    fn after_layer(&mut self, ctx: LayerCtx<'_>) -> Directive {
        if ctx.layer > self.l_p {
            return Directive::default();
        }
        Directive {
            cache_keep: Some(CacheKeep::Uniform(self.kept.clone())),
            prune_to: (ctx.layer == self.l_p).then(|| self.kept.clone()),
        }
    }

    fn wants_trace(&self, _layer: usize) -> bool {
        false
    }
}

/// Single-pass mirror of the oracle, for architecture-matched comparison
/// with the in-flight heuristics: layers up to `l_p` compress their cache
/// to the oracle's top-k while full hidden states propagate; at `l_p` the
/// sequence prunes to the same indices.
pub fn oracle_emulation_prefill(
    model: &Model,
    prompt: &TokenSequence,
    scores: &ImportanceScores,
    cfg: &PipelineConfig<'_>,
) -> Result<PrefillResult, PipelineError> {
    let p = &cfg.params;
    p.validate(model.config.num_layers)?;
    check_score_len(scores, prompt)?;
    let started = Instant::now();
    let k = keep_count(p.keep_rate, prompt.len())?;
    let kept = topk_indices(scores, k, None)?;
    let mut obs = SharedSetObserver {
        l_p: p.l_p,
        kept: kept.clone(),
    };
    let out = run_prefill(model, prompt, &[], &mut obs, None, EngineOptions::default())?;
    Ok(finish(out, prompt, kept, None, Some(scores.clone()), started))
}

/// Single-pass observer with deferred compression and cross-layer
/// max-aggregation: layers below `m` stay uncompressed; layers `m..=l_p`
/// compress their cache by the current layer's pooled window score and push
/// the raw score into a ring buffer; at `l_p` the elementwise max over the
/// buffered layers — pooled — selects the surviving sequence.
struct ClaaObserver {
    w: usize,
    m: usize,
    l_p: usize,
    keep: usize,
    kernel: usize,
    buffer: LayerScoreBuffer,
    scores: BTreeMap<usize, ImportanceScores>,
    kept: Option<Vec<usize>>,
    selection: Option<ImportanceScores>,
    err: Option<RankError>,
}

impl ClaaObserver {
    fn rank(&mut self, ctx: &LayerCtx<'_>) -> Result<Directive, RankError> {
        let lt = ctx.trace.expect("trace requested for ranking layers");
        let force = window_force(lt.len, self.w, self.keep);
        let raw = window_score_layer(lt, ctx.layer, self.w)?;
        let pooled = pool1d(&raw, self.kernel)?;
        self.buffer.push(raw);
        let mut directive = Directive {
            cache_keep: Some(CacheKeep::Uniform(topk_indices(
                &pooled,
                self.keep,
                Some(&force),
            )?)),
            prune_to: None,
        };
        if ctx.layer == self.l_p {
            let agg = pool1d(&claa_aggregate(&self.buffer)?, self.kernel)?;
            let sel = topk_indices(&agg, self.keep, Some(&force))?;
            self.kept = Some(sel.clone());
            self.selection = Some(agg);
            directive.prune_to = Some(sel);
        }
        self.scores.insert(ctx.layer, pooled);
        Ok(directive)
    }
}

impl LayerObserver for ClaaObserver {
    fn after_layer(&mut self, ctx: LayerCtx<'_>) -> Directive {
        if ctx.layer < self.m || ctx.layer > self.l_p || self.err.is_some() {
            return Directive::default();
        }
        match self.rank(&ctx) {
            Ok(d) => d,
            Err(e) => {
                self.err = Some(e);
                Directive::default()
            }
        }
    }

    fn wants_trace(&self, layer: usize) -> bool {
        layer >= self.m && layer <= self.l_p && self.err.is_none()
    }
}

/// Single-pass prefill with deferred compression (layers `0..m` keep their
/// full cache) and cross-layer score aggregation at the pruning layer.
pub fn claa_prefill(
    model: &Model,
    prompt: &TokenSequence,
    cfg: &PipelineConfig<'_>,
) -> Result<PrefillResult, PipelineError> {
    let p = &cfg.params;
    p.validate(model.config.num_layers)?;
    if p.w > prompt.len() {
        return Err(RankError::WindowTooLarge {
            w: p.w,
            len: prompt.len(),
        }
        .into());
    }
    let started = Instant::now();
    let mut obs = ClaaObserver {
        w: p.w,
        m: p.m,
        l_p: p.l_p,
        keep: keep_count(p.keep_rate, prompt.len())?,
        kernel: p.pool_kernel,
        buffer: LayerScoreBuffer::new(p.n),
        scores: BTreeMap::new(),
        kept: None,
        selection: None,
        err: None,
    };
    let out = run_prefill(model, prompt, &[], &mut obs, None, EngineOptions::default())?;
    if let Some(e) = obs.err {
        return Err(e.into());
    }
    let kept = obs.kept.take().expect("pruning layer ran");
    Ok(finish(out, prompt, kept, Some(obs.scores), obs.selection, started))
}

/// Runs the configured method end to end. Oracle-based methods use
/// `oracle_scores` when supplied (letting callers share one oracle run
/// across cells) and derive them internally otherwise.
pub fn run_pipeline(
    model: &Model,
    prompt: &TokenSequence,
    cfg: &PipelineConfig<'_>,
    oracle_scores: Option<&ImportanceScores>,
) -> Result<PrefillResult, PipelineError> {
    cfg.validate(model)?;
    match cfg.method {
        Method::FullKv => full_prefill(model, prompt),
        Method::GemFilter => gemfilter_prefill(model, prompt, cfg),
        Method::FastKv => fastkv_prefill(model, prompt, cfg),
        Method::SpecPrefill => {
            let spec = cfg.speculator.ok_or(PipelineError::MissingSpeculator)?;
            speculative_prefill(model, spec, prompt, cfg)
        }
        Method::Oracle2Pass | Method::OracleEmulated => {
            let derived;
            let scores = match oracle_scores {
                Some(s) => s,
                None => {
                    derived = oracle_ranking(model, prompt, &cfg.params, None)?;
                    &derived
                }
            };
            if cfg.method == Method::Oracle2Pass {
                oracle_prefill(model, prompt, scores, cfg)
            } else {
                oracle_emulation_prefill(model, prompt, scores, cfg)
            }
        }
        Method::Claa => claa_prefill(model, prompt, cfg),
    }
}

/// Greedy decode for `steps` tokens from a finished prefill. New tokens are
/// appended to every layer's cache uncompressed; positions continue from
/// the original prompt length. The result's cache and logits advance, so
/// consecutive calls continue the same stream.
pub fn decode(
    model: &Model,
    result: &mut PrefillResult,
    steps: usize,
) -> Result<Vec<u32>, PipelineError> {
    let mut tokens = Vec::with_capacity(steps);
    let mut current = argmax_lowest(&result.next_logits);
    for _ in 0..steps {
        tokens.push(current);
        let logits = decode_step(model, &mut result.kv, current, None)?;
        current = argmax_lowest(&logits);
        result.next_logits = logits;
    }
    Ok(tokens)
}
