//! The forward pass: pre-norm decoder layers with grouped-query attention,
//! rotary positions, causal masking, KV-cache population, instrumentation
//! hooks, and single-token decode.

use std::collections::BTreeMap;

use super::cache::{KvCache, LayerCache};
use super::rope::apply_rope;
use super::{Model, ModelError, TokenSequence, RMS_EPS};
use crate::linalg;

/// Raw scaled dot-product scores: `out[i][j] = dot(Q[i], K[j]) / sqrt(d_k)`.
///
/// `q` is `[n_q][d_k]` row-major, `k` is `[n_k][d_k]` row-major; the result
/// is `[n_q][n_k]` flattened. No masking, no softmax.
pub fn attention_scores(q: &[f32], k: &[f32], d_k: usize) -> Result<Vec<f32>, ModelError> {
    if d_k == 0 || q.len() % d_k != 0 || k.len() % d_k != 0 {
        return Err(ModelError::InvalidConfig(format!(
            "attention_scores: lengths {}/{} not divisible by d_k {}",
            q.len(),
            k.len(),
            d_k
        )));
    }
    let n_q = q.len() / d_k;
    let n_k = k.len() / d_k;
    let mut out = vec![0.0; n_q * n_k];
    let scale = 1.0 / (d_k as f32).sqrt();
    linalg::matmul_nt(&mut out, q, k, n_q, d_k, n_k);
    for v in &mut out {
        *v *= scale;
    }
    Ok(out)
}

/// Row-wise softmax over a `[n_q][n_k]` score matrix, in place.
///
/// Numerically stabilized by row-max subtraction. With
/// `causal_offset = Some(c)`, entry `(i, j)` with `j > i + c` receives
/// probability exactly 0 (it is excluded before normalization).
pub fn softmax_rows(
    scores: &mut [f32],
    n_k: usize,
    causal_offset: Option<usize>,
) -> Result<(), ModelError> {
    if n_k == 0 {
        return Err(ModelError::InvalidConfig("softmax over empty rows".into()));
    }
    debug_assert_eq!(scores.len() % n_k, 0);
    let n_q = scores.len() / n_k;
    for i in 0..n_q {
        let row = &mut scores[i * n_k..(i + 1) * n_k];
        let visible = match causal_offset {
            Some(c) => (i + c + 1).min(n_k),
            None => n_k,
        };
        if visible == 0 {
            return Err(ModelError::InvalidConfig(format!(
                "softmax row {i} has no visible entries"
            )));
        }
        softmax_prefix(row, visible);
    }
    Ok(())
}

/// Softmax over `row[..visible]`, zeroing the rest.
fn softmax_prefix(row: &mut [f32], visible: usize) {
    let max = row[..visible]
        .iter()
        .fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for v in &mut row[..visible] {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in &mut row[..visible] {
        *v *= inv;
    }
    for v in &mut row[visible..] {
        *v = 0.0;
    }
}

/// Post-rotary query/key tensors captured at one layer.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Head-major queries `[num_heads][len][head_dim]`.
    pub queries: Vec<f32>,
    /// Group-major keys `[num_kv_heads][len][head_dim]`.
    pub keys: Vec<f32>,
    /// Sequence length the tensors were recorded at.
    pub len: usize,
    pub head_dim: usize,
}

impl LayerTrace {
    /// Query vector of head `h` at sequence index `i`.
    pub fn query(&self, h: usize, i: usize) -> &[f32] {
        let base = (h * self.len + i) * self.head_dim;
        &self.queries[base..base + self.head_dim]
    }

    /// All keys of group `g` as a `[len][head_dim]` block.
    pub fn group_keys(&self, g: usize) -> &[f32] {
        let base = g * self.len * self.head_dim;
        &self.keys[base..base + self.len * self.head_dim]
    }

    /// Key vector of group `g` at sequence index `i`.
    pub fn key(&self, g: usize, i: usize) -> &[f32] {
        let base = (g * self.len + i) * self.head_dim;
        &self.keys[base..base + self.head_dim]
    }
}

/// Captured per-layer traces of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    pub layers: BTreeMap<usize, LayerTrace>,
    /// Sequence length of the pass at entry (before any in-pass pruning).
    pub seq_len: usize,
}

impl ForwardTrace {
    pub fn layer(&self, l: usize) -> Option<&LayerTrace> {
        self.layers.get(&l)
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// Cache-compression callback invoked after each layer's attention
/// completes. Receives the layer index and that layer's freshly stored
/// cache; it may drop cache rows but has no access to hidden states.
pub type CompressHook<'a> = &'a mut dyn FnMut(usize, &mut LayerCache);

/// How a layer observer wants the engine to proceed.
#[derive(Debug, Default)]
pub(crate) struct Directive {
    /// Replace the just-stored layer cache with a row subset.
    pub cache_keep: Option<CacheKeep>,
    /// Prune the hidden-state sequence to these (ascending) indices before
    /// the next layer.
    pub prune_to: Option<Vec<usize>>,
}

#[derive(Debug)]
pub(crate) enum CacheKeep {
    /// Same rows for every KV group.
    Uniform(Vec<usize>),
    /// Independent rows per KV group.
    PerGroup(Vec<Vec<usize>>),
}

/// Per-layer context handed to observers: the current layer's post-rotary
/// tensors plus the live position ids. `trace` is `None` when the observer
/// declined it via [`LayerObserver::wants_trace`].
pub(crate) struct LayerCtx<'a> {
    pub layer: usize,
    pub trace: Option<&'a LayerTrace>,
    #[allow(dead_code)]
    pub positions: &'a [usize],
}

/// Observers drive the single-pass pruning pipelines; the engine invokes
/// them after every layer. They must not alter hidden states.
pub(crate) trait LayerObserver {
    fn after_layer(&mut self, ctx: LayerCtx<'_>) -> Directive;

    /// Whether the observer will read the layer's trace; lets the engine
    /// skip the head-major copy on layers where the observer only needs the
    /// callback, and on passive observers entirely.
    fn wants_trace(&self, _layer: usize) -> bool {
        true
    }
}

/// The no-op observer used by plain forwards.
pub(crate) struct NoopObserver;

impl LayerObserver for NoopObserver {
    fn after_layer(&mut self, _ctx: LayerCtx<'_>) -> Directive {
        Directive::default()
    }

    fn wants_trace(&self, _layer: usize) -> bool {
        false
    }
}

pub(crate) struct PrefillOutput {
    /// Logits of the final sequence position, `[vocab]`.
    pub last_logits: Vec<f32>,
    /// Logits for every position, `[len][vocab]`, when requested.
    pub all_logits: Option<Vec<f32>>,
    pub cache: KvCache,
    pub trace: ForwardTrace,
    /// Position ids of the sequence the final layers ran on (reflects any
    /// in-pass pruning).
    pub final_positions: Vec<usize>,
}

pub(crate) struct EngineOptions {
    pub want_all_logits: bool,
    /// Stop after this layer completes (inclusive); skips remaining layers
    /// and the output head. Used by ranking-only partial passes.
    pub stop_after_layer: Option<usize>,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            want_all_logits: false,
            stop_after_layer: None,
        }
    }
}

/// Standard full forward pass over a token sequence.
///
/// Returns per-position logits `[len][vocab]`, the populated KV cache, and
/// traces for the layers listed in `capture`. `compress_hook`, when
/// present, runs after each layer's attention completes and may replace
/// that layer's cache rows; hidden states are unaffected by construction.
pub fn full_forward(
    model: &Model,
    seq: &TokenSequence,
    capture: &[usize],
    compress_hook: Option<CompressHook<'_>>,
) -> Result<(Vec<f32>, KvCache, ForwardTrace), ModelError> {
    let opts = EngineOptions {
        want_all_logits: true,
        stop_after_layer: None,
    };
    let out = run_prefill(model, seq, capture, &mut NoopObserver, compress_hook, opts)?;
    Ok((
        out.all_logits.expect("all_logits requested"),
        out.cache,
        out.trace,
    ))
}

pub(crate) fn run_prefill(
    model: &Model,
    seq: &TokenSequence,
    capture: &[usize],
    observer: &mut dyn LayerObserver,
    mut compress_hook: Option<CompressHook<'_>>,
    opts: EngineOptions,
) -> Result<PrefillOutput, ModelError> {
    seq.validate(&model.config)?;
    let cfg = &model.config;
    let d = cfg.d_model;
    let h = cfg.num_heads;
    let g = cfg.num_kv_heads;
    let dk = cfg.head_dim;
    let ff = cfg.d_ff();
    let l0 = seq.len();

    let mut x = vec![0.0f32; l0 * d];
    for (i, &tok) in seq.tokens.iter().enumerate() {
        let row = &model.embed[tok as usize * d..(tok as usize + 1) * d];
        x[i * d..(i + 1) * d].copy_from_slice(row);
    }
    let mut positions = seq.position_ids.clone();

    let mut cache = KvCache::new(cfg);
    cache.seq_len = positions.last().copied().unwrap_or(0) + 1;
    let mut trace = ForwardTrace {
        layers: BTreeMap::new(),
        seq_len: l0,
    };

    // scratch buffers sized for the entry length; pruning only shrinks
    let mut normed = vec![0.0f32; l0 * d];
    let mut q = vec![0.0f32; l0 * h * dk];
    let mut k = vec![0.0f32; l0 * g * dk];
    let mut v = vec![0.0f32; l0 * g * dk];
    let mut attn = vec![0.0f32; l0 * h * dk];
    let mut scores = vec![0.0f32; l0 * l0];
    let mut gate = vec![0.0f32; l0 * ff];
    let mut up = vec![0.0f32; l0 * ff];

    let last_layer = opts.stop_after_layer.unwrap_or(cfg.num_layers - 1);

    for layer_idx in 0..=last_layer.min(cfg.num_layers - 1) {
        let lw = &model.layers[layer_idx];
        let lc = positions.len();

        // pre-attention norm
        for i in 0..lc {
            linalg::rms_norm(
                &mut normed[i * d..(i + 1) * d],
                &x[i * d..(i + 1) * d],
                &lw.attn_norm,
                RMS_EPS,
            );
        }
        // projections
        linalg::matmul(&mut q[..lc * h * dk], &normed[..lc * d], &lw.wq, lc, d, h * dk);
        linalg::matmul(&mut k[..lc * g * dk], &normed[..lc * d], &lw.wk, lc, d, g * dk);
        linalg::matmul(&mut v[..lc * g * dk], &normed[..lc * d], &lw.wv, lc, d, g * dk);
        // rotary at original positions
        for i in 0..lc {
            for head in 0..h {
                apply_rope(
                    &mut q[(i * h + head) * dk..(i * h + head + 1) * dk],
                    positions[i],
                    cfg.rope_theta,
                );
            }
            for grp in 0..g {
                apply_rope(
                    &mut k[(i * g + grp) * dk..(i * g + grp + 1) * dk],
                    positions[i],
                    cfg.rope_theta,
                );
            }
        }

        // attention per head: scores = Q_h K_g^T / sqrt(dk), causal softmax,
        // context = P V_g
        let scale = 1.0 / (dk as f32).sqrt();
        for head in 0..h {
            let grp = cfg.group_of_head(head);
            unsafe {
                matrixmultiply::sgemm(
                    lc,
                    dk,
                    lc,
                    scale,
                    q.as_ptr().add(head * dk),
                    (h * dk) as isize,
                    1,
                    k.as_ptr().add(grp * dk),
                    1,
                    (g * dk) as isize,
                    0.0,
                    scores.as_mut_ptr(),
                    lc as isize,
                    1,
                );
            }
            for i in 0..lc {
                softmax_prefix(&mut scores[i * lc..(i + 1) * lc], i + 1);
            }
            unsafe {
                matrixmultiply::sgemm(
                    lc,
                    lc,
                    dk,
                    1.0,
                    scores.as_ptr(),
                    lc as isize,
                    1,
                    v.as_ptr().add(grp * dk),
                    (g * dk) as isize,
                    1,
                    0.0,
                    attn.as_mut_ptr().add(head * dk),
                    (h * dk) as isize,
                    1,
                );
            }
        }
        // output projection, accumulated into the residual stream
        unsafe {
            matrixmultiply::sgemm(
                lc,
                h * dk,
                d,
                1.0,
                attn.as_ptr(),
                (h * dk) as isize,
                1,
                lw.wo.as_ptr(),
                d as isize,
                1,
                1.0,
                x.as_mut_ptr(),
                d as isize,
                1,
            );
        }

        // feed-forward: x += silu(normed @ w_gate) * (normed @ w_up) @ w_down
        for i in 0..lc {
            linalg::rms_norm(
                &mut normed[i * d..(i + 1) * d],
                &x[i * d..(i + 1) * d],
                &lw.ffn_norm,
                RMS_EPS,
            );
        }
        linalg::matmul(&mut gate[..lc * ff], &normed[..lc * d], &lw.w_gate, lc, d, ff);
        linalg::matmul(&mut up[..lc * ff], &normed[..lc * d], &lw.w_up, lc, d, ff);
        for (gv, uv) in gate[..lc * ff].iter_mut().zip(&up[..lc * ff]) {
            *gv = linalg::silu(*gv) * uv;
        }
        unsafe {
            matrixmultiply::sgemm(
                lc,
                ff,
                d,
                1.0,
                gate.as_ptr(),
                ff as isize,
                1,
                lw.w_down.as_ptr(),
                d as isize,
                1,
                1.0,
                x.as_mut_ptr(),
                d as isize,
                1,
            );
        }

        // store this layer's KV cache (post-rotary keys, raw values)
        let layer_cache = &mut cache.layers[layer_idx];
        for grp in 0..g {
            let gc = &mut layer_cache.groups[grp];
            gc.keys.reserve(lc * dk);
            gc.values.reserve(lc * dk);
            for i in 0..lc {
                gc.push_row(
                    &k[(i * g + grp) * dk..(i * g + grp + 1) * dk],
                    &v[(i * g + grp) * dk..(i * g + grp + 1) * dk],
                    positions[i],
                );
            }
        }

        // public compress hooks get direct cache access; pipeline observers
        // go through the directive protocol
        if let Some(hook) = compress_hook.as_mut() {
            hook(layer_idx, &mut cache.layers[layer_idx]);
        }

        // head-major trace of the current layer for observers and capture
        let captured = capture.contains(&layer_idx);
        let layer_trace = if captured || observer.wants_trace(layer_idx) {
            Some(build_layer_trace(
                &q[..lc * h * dk],
                &k[..lc * g * dk],
                lc,
                h,
                g,
                dk,
            ))
        } else {
            None
        };
        let directive = observer.after_layer(LayerCtx {
            layer: layer_idx,
            trace: layer_trace.as_ref(),
            positions: &positions,
        });
        if captured {
            trace
                .layers
                .insert(layer_idx, layer_trace.expect("trace built when captured"));
        }

        if let Some(keep) = directive.cache_keep {
            let layer_cache = &mut cache.layers[layer_idx];
            match keep {
                CacheKeep::Uniform(rows) => layer_cache.keep_rows_uniform(&rows, dk),
                CacheKeep::PerGroup(per) => {
                    debug_assert_eq!(per.len(), g);
                    for (grp, rows) in per.iter().enumerate() {
                        layer_cache.groups[grp].keep_rows(rows, dk);
                    }
                }
            }
        }
        if let Some(kept) = directive.prune_to {
            debug_assert!(kept.windows(2).all(|w| w[0] < w[1]));
            debug_assert!(kept.last().is_none_or(|&i| i < lc));
            for (dst, &src) in kept.iter().enumerate() {
                x.copy_within(src * d..(src + 1) * d, dst * d);
            }
            positions = kept.iter().map(|&i| positions[i]).collect();
            x.truncate(positions.len() * d);
        }
    }

    // output head
    let lc = positions.len();
    let (last_logits, all_logits) = if opts.stop_after_layer.is_some() {
        (Vec::new(), None)
    } else {
        for i in 0..lc {
            linalg::rms_norm(
                &mut normed[i * d..(i + 1) * d],
                &x[i * d..(i + 1) * d],
                &model.final_norm,
                RMS_EPS,
            );
        }
        if opts.want_all_logits {
            let mut logits = vec![0.0f32; lc * cfg.vocab_size];
            linalg::matmul(
                &mut logits,
                &normed[..lc * d],
                &model.lm_head,
                lc,
                d,
                cfg.vocab_size,
            );
            let last = logits[(lc - 1) * cfg.vocab_size..].to_vec();
            (last, Some(logits))
        } else {
            let mut last = vec![0.0f32; cfg.vocab_size];
            linalg::matmul(
                &mut last,
                &normed[(lc - 1) * d..lc * d],
                &model.lm_head,
                1,
                d,
                cfg.vocab_size,
            );
            (last, None)
        }
    };

    Ok(PrefillOutput {
        last_logits,
        all_logits,
        cache,
        trace,
        final_positions: positions,
    })
}

fn build_layer_trace(q: &[f32], k: &[f32], len: usize, h: usize, g: usize, dk: usize) -> LayerTrace {
    let mut queries = vec![0.0f32; h * len * dk];
    for i in 0..len {
        for head in 0..h {
            let src = (i * h + head) * dk;
            let dst = (head * len + i) * dk;
            queries[dst..dst + dk].copy_from_slice(&q[src..src + dk]);
        }
    }
    let mut keys = vec![0.0f32; g * len * dk];
    for i in 0..len {
        for grp in 0..g {
            let src = (i * g + grp) * dk;
            let dst = (grp * len + i) * dk;
            keys[dst..dst + dk].copy_from_slice(&k[src..src + dk]);
        }
    }
    LayerTrace {
        queries,
        keys,
        len,
        head_dim: dk,
    }
}

/// Runs one decode step: appends `token` at the cache's next position,
/// attends over every layer's (possibly compressed, possibly ragged)
/// cache, and returns the next-token logits.
///
/// When `capture_queries` is provided, the new token's post-rotary queries
/// are appended per layer as `[num_heads * head_dim]` blocks.
pub fn decode_step(
    model: &Model,
    cache: &mut KvCache,
    token: u32,
    capture_queries: Option<&mut Vec<f32>>,
) -> Result<Vec<f32>, ModelError> {
    let cfg = &model.config;
    if token as usize >= cfg.vocab_size {
        return Err(ModelError::TokenOutOfRange {
            token,
            vocab: cfg.vocab_size,
        });
    }
    let position = cache.seq_len;
    if position >= cfg.max_position {
        return Err(ModelError::PositionOverflow {
            position,
            max: cfg.max_position,
        });
    }
    let d = cfg.d_model;
    let h = cfg.num_heads;
    let g = cfg.num_kv_heads;
    let dk = cfg.head_dim;
    let ff = cfg.d_ff();

    let mut x = model.embed[token as usize * d..(token as usize + 1) * d].to_vec();
    let mut normed = vec![0.0f32; d];
    let mut q = vec![0.0f32; h * dk];
    let mut kk = vec![0.0f32; g * dk];
    let mut vv = vec![0.0f32; g * dk];
    let mut attn = vec![0.0f32; h * dk];
    let mut gate = vec![0.0f32; ff];
    let mut up = vec![0.0f32; ff];
    let mut captured = capture_queries;

    for layer_idx in 0..cfg.num_layers {
        let lw = &model.layers[layer_idx];
        linalg::rms_norm(&mut normed, &x, &lw.attn_norm, RMS_EPS);
        linalg::matmul(&mut q, &normed, &lw.wq, 1, d, h * dk);
        linalg::matmul(&mut kk, &normed, &lw.wk, 1, d, g * dk);
        linalg::matmul(&mut vv, &normed, &lw.wv, 1, d, g * dk);
        for head in 0..h {
            apply_rope(&mut q[head * dk..(head + 1) * dk], position, cfg.rope_theta);
        }
        for grp in 0..g {
            apply_rope(&mut kk[grp * dk..(grp + 1) * dk], position, cfg.rope_theta);
        }
        if let Some(buf) = captured.as_deref_mut() {
            buf.extend_from_slice(&q);
        }

        // append the new entry, then attend over the whole group cache
        let layer_cache = &mut cache.layers[layer_idx];
        for grp in 0..g {
            layer_cache.groups[grp].push_row(
                &kk[grp * dk..(grp + 1) * dk],
                &vv[grp * dk..(grp + 1) * dk],
                position,
            );
        }
        let scale = 1.0 / (dk as f32).sqrt();
        for head in 0..h {
            let grp = cfg.group_of_head(head);
            let gc = &layer_cache.groups[grp];
            let len = gc.len();
            let qh = &q[head * dk..(head + 1) * dk];
            let mut row = vec![0.0f32; len];
            linalg::matmul_nt(&mut row, qh, &gc.keys, 1, dk, len);
            for s in &mut row {
                *s *= scale;
            }
            softmax_prefix(&mut row, len);
            let out = &mut attn[head * dk..(head + 1) * dk];
            out.fill(0.0);
            for (j, &p) in row.iter().enumerate() {
                let vrow = &gc.values[j * dk..(j + 1) * dk];
                for (o, &vx) in out.iter_mut().zip(vrow) {
                    *o += p * vx;
                }
            }
        }
        let mut delta = vec![0.0f32; d];
        linalg::matmul(&mut delta, &attn, &lw.wo, 1, h * dk, d);
        for (xv, dv) in x.iter_mut().zip(&delta) {
            *xv += dv;
        }

        linalg::rms_norm(&mut normed, &x, &lw.ffn_norm, RMS_EPS);
        linalg::matmul(&mut gate, &normed, &lw.w_gate, 1, d, ff);
        linalg::matmul(&mut up, &normed, &lw.w_up, 1, d, ff);
        for (gv, uv) in gate.iter_mut().zip(&up) {
            *gv = linalg::silu(*gv) * uv;
        }
        let mut down = vec![0.0f32; d];
        linalg::matmul(&mut down, &gate, &lw.w_down, 1, ff, d);
        for (xv, dv) in x.iter_mut().zip(&down) {
            *xv += dv;
        }
    }

    cache.seq_len = position + 1;
    linalg::rms_norm(&mut normed, &x, &model.final_norm, RMS_EPS);
    let mut logits = vec![0.0f32; cfg.vocab_size];
    linalg::matmul(&mut logits, &normed, &model.lm_head, 1, d, cfg.vocab_size);
    Ok(logits)
}

#[cfg(test)]
mod tests {
    use super::super::{random_init_model, test_config};
    use super::*;

    #[test]
    fn attention_scores_hand_example() {
        // Q=[[1,0]], K=[[1,0],[0,1]], d_k=2 -> [[1/sqrt(2), 0]]
        let out = attention_scores(&[1.0, 0.0], &[1.0, 0.0, 0.0, 1.0], 2).unwrap();
        assert!((out[0] - 1.0 / 2.0_f32.sqrt()).abs() < 1e-6);
        assert_eq!(out[1], 0.0);
    }

    #[test]
    fn attention_scores_zero_query() {
        let out = attention_scores(&[0.0, 0.0], &[0.3, 0.4, -0.5, 0.2], 2).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn attention_scores_self_dot() {
        // Q=K=[[1,1]], d_k=2 -> [[2/sqrt(2)]] = [[sqrt(2)]]
        let out = attention_scores(&[1.0, 1.0], &[1.0, 1.0], 2).unwrap();
        assert!((out[0] - 2.0_f32.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn attention_scores_dimension_mismatch() {
        assert!(attention_scores(&[1.0, 0.0, 0.5], &[1.0, 0.0], 2).is_err());
    }

    #[test]
    fn softmax_uniform_row() {
        let mut s = vec![0.0, 0.0];
        softmax_rows(&mut s, 2, None).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-7);
        assert!((s[1] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn softmax_large_values_stable() {
        let mut s = vec![1000.0, 0.0];
        softmax_rows(&mut s, 2, None).unwrap();
        assert!(s[0] > 0.999 && s[0].is_finite());
        assert!(s[1] < 1e-6);
    }

    #[test]
    fn softmax_causal_first_row() {
        let mut s = vec![3.0, 9.0, 1.0, 1.0];
        softmax_rows(&mut s, 2, Some(0)).unwrap();
        assert_eq!(&s[..2], &[1.0, 0.0]);
        assert!((s[2] - 0.5).abs() < 1e-7 && (s[3] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn softmax_rejects_empty_rows() {
        let mut s: Vec<f32> = vec![];
        assert!(softmax_rows(&mut s, 0, None).is_err());
    }

    #[test]
    fn forward_without_capture_has_empty_trace() {
        let model = random_init_model(&test_config(2), 1).unwrap();
        let seq = TokenSequence::new(vec![1, 2, 3, 4]);
        let (logits, kv, trace) = full_forward(&model, &seq, &[], None).unwrap();
        assert!(trace.is_empty());
        assert_eq!(logits.len(), 4 * model.config.vocab_size);
        assert_eq!(kv.layers[0].groups[0].len(), 4);
        assert_eq!(kv.seq_len, 4);
    }

    #[test]
    fn forward_identity_pruning_matches() {
        let model = random_init_model(&test_config(2), 2).unwrap();
        let seq = TokenSequence::new(vec![5, 6, 7]);
        let pruned = seq.select(&[0, 1, 2]);
        let (a, _, _) = full_forward(&model, &seq, &[], None).unwrap();
        let (b, _, _) = full_forward(&model, &pruned, &[], None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_noop_hook_matches_no_hook() {
        let model = random_init_model(&test_config(2), 3).unwrap();
        let seq = TokenSequence::new(vec![9, 8, 7, 6]);
        let (a, _, _) = full_forward(&model, &seq, &[], None).unwrap();
        let mut hook = |_l: usize, _c: &mut LayerCache| {};
        let (b, kv, _) = full_forward(&model, &seq, &[], Some(&mut hook)).unwrap();
        assert_eq!(a, b);
        assert_eq!(kv.layers[1].groups[0].len(), 4);
    }

    #[test]
    fn forward_hook_can_compress_cache() {
        let model = random_init_model(&test_config(2), 3).unwrap();
        let seq = TokenSequence::new(vec![9, 8, 7, 6]);
        let dk = model.config.head_dim;
        let mut hook = |_l: usize, c: &mut LayerCache| c.keep_rows_uniform(&[1, 3], dk);
        let (logits, kv, _) = full_forward(&model, &seq, &[], Some(&mut hook)).unwrap();
        let (plain, _, _) = full_forward(&model, &seq, &[], None).unwrap();
        // hidden states were unaffected
        assert_eq!(logits, plain);
        for layer in &kv.layers {
            for grp in &layer.groups {
                assert_eq!(grp.positions, vec![1, 3]);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = random_init_model(&test_config(3), 11).unwrap();
        let seq = TokenSequence::new(vec![0, 1, 2, 3, 4, 5]);
        let (a, _, _) = full_forward(&model, &seq, &[], None).unwrap();
        let (b, _, _) = full_forward(&model, &seq, &[], None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn captured_trace_shapes() {
        let model = random_init_model(&test_config(2), 4).unwrap();
        let seq = TokenSequence::new(vec![1, 2, 3, 4, 5]);
        let (_, _, trace) = full_forward(&model, &seq, &[1], None).unwrap();
        let lt = trace.layer(1).unwrap();
        assert_eq!(lt.len, 5);
        assert_eq!(lt.queries.len(), 4 * 5 * 8); // H * L * dk
        assert_eq!(lt.keys.len(), 2 * 5 * 8); // G * L * dk
        assert!(trace.layer(0).is_none());
    }

    #[test]
    fn decode_step_extends_cache_and_positions() {
        let model = random_init_model(&test_config(2), 5).unwrap();
        let seq = TokenSequence::new(vec![1, 2, 3]);
        let (_, mut kv, _) = full_forward(&model, &seq, &[], None).unwrap();
        let logits = decode_step(&model, &mut kv, 7, None).unwrap();
        assert_eq!(logits.len(), model.config.vocab_size);
        assert_eq!(kv.seq_len, 4);
        assert_eq!(kv.layers[0].groups[0].positions, vec![0, 1, 2, 3]);
    }

    #[test]
    fn decode_matches_prefill_of_extended_sequence() {
        // decoding token t after prefill([a,b,c]) must equal the last-row
        // logits of prefill([a,b,c,t])
        let model = random_init_model(&test_config(3), 6).unwrap();
        let (_, mut kv, _) =
            full_forward(&model, &TokenSequence::new(vec![1, 2, 3]), &[], None).unwrap();
        let dec = decode_step(&model, &mut kv, 4, None).unwrap();
        let (all, _, _) =
            full_forward(&model, &TokenSequence::new(vec![1, 2, 3, 4]), &[], None).unwrap();
        let vocab = model.config.vocab_size;
        let last = &all[3 * vocab..];
        for (a, b) in dec.iter().zip(last) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn causality_under_suffix_perturbation() {
        let model = random_init_model(&test_config(2), 7).unwrap();
        let base = TokenSequence::new(vec![1, 2, 3, 4, 5, 6]);
        let mut perturbed = base.clone();
        perturbed.tokens[4] = 60;
        let (a, _, _) = full_forward(&model, &base, &[], None).unwrap();
        let (b, _, _) = full_forward(&model, &perturbed, &[], None).unwrap();
        let vocab = model.config.vocab_size;
        assert_eq!(&a[..4 * vocab], &b[..4 * vocab]);
        assert_ne!(&a[4 * vocab..], &b[4 * vocab..]);
    }
}
