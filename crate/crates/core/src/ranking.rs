//! Pure scoring functions: per-token importance from captured attention
//! tensors, cross-layer aggregation, pooling, and top-k selection.
//!
//! All functions are deterministic and side-effect free. Score vectors are
//! indexed by prompt position; higher means more important.

use std::collections::{BTreeSet, VecDeque};

use crate::model::{ForwardTrace, LayerTrace, OracleTrace};

/// Errors raised by scoring and selection.
#[derive(Debug, thiserror::Error)]
pub enum RankError {
    #[error("layer {layer} not captured in trace")]
    LayerNotCaptured { layer: usize },
    #[error("observation window {w} exceeds sequence length {len}")]
    WindowTooLarge { w: usize, len: usize },
    #[error("window size must be >= 1")]
    EmptyWindow,
    #[error("pooling kernel {kernel} must be odd")]
    EvenKernel { kernel: usize },
    #[error("pooling kernel must be >= 1")]
    ZeroKernel,
    #[error("keep_rate {rate} outside (0, 1]")]
    KeepRateOutOfRange { rate: f64 },
    #[error("k {k} exceeds sequence length {len}")]
    KTooLarge { k: usize, len: usize },
    #[error("force_include has {forced} indices but k is {k}")]
    ForceTooLarge { forced: usize, k: usize },
    #[error("force_include index {index} out of range (length {len})")]
    ForceOutOfRange { index: usize, len: usize },
    #[error("invalid KV group {group} (num groups {groups})")]
    InvalidGroup { group: usize, groups: usize },
    #[error("empty score buffer")]
    EmptyBuffer,
    #[error("score length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("empty lookahead: speculator generated no tokens")]
    EmptyLookahead,
    #[error("oracle undefined: generation produced no tokens")]
    OracleUndefined,
    #[error("non-finite score at index {index}")]
    NonFiniteScore { index: usize },
    #[error("invalid params: {0}")]
    InvalidParams(String),
}

/// A length-L vector of per-prompt-token importance scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    pub values: Vec<f32>,
    /// The layer the scores were computed at, when layer-specific.
    pub layer_of_origin: Option<usize>,
}

impl ImportanceScores {
    pub fn new(values: Vec<f32>) -> Self {
        Self {
            values,
            layer_of_origin: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Serializes as CSV with an `index,score` header.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["index", "score"])?;
        for (i, v) in self.values.iter().enumerate() {
            wtr.write_record([i.to_string(), v.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Hyperparameters shared by the ranking strategies.
///
/// Defaults: `w = 8`, `pool_kernel = 7`, `l_p = 15`, `n = 4`, `m = 4`,
/// `k = 8`, `r = 15` — the reference settings for 32-layer models; for
/// smaller stacks choose `l_p`/`r` near `num_layers / 2` (halfway matches
/// the reference placement) and validate with
/// [`RankingParams::validate`]. `keep_rate` defaults to 0.2, the middle of
/// the commonly explored 10/20/40% range, and `n_gen` to 64.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RankingParams {
    /// Observation window: the last `w` prompt tokens whose queries score
    /// all prompt tokens.
    pub w: usize,
    /// 1D average-pooling kernel applied to scores before selection (odd).
    pub pool_kernel: usize,
    /// Fraction of prompt tokens to keep, in (0, 1].
    pub keep_rate: f64,
    /// Cross-layer aggregation window (number of buffered layer scores).
    pub n: usize,
    /// First compressed layer; layers below keep their full cache.
    pub m: usize,
    /// Pruning layer: where hidden states shrink to the kept set.
    pub l_p: usize,
    /// Query layer for last-token ranking (two-pass routing layer).
    pub r: usize,
    /// Speculator lookahead length.
    pub k: usize,
    /// Oracle generation cap.
    pub n_gen: usize,
}

impl Default for RankingParams {
    fn default() -> Self {
        Self {
            w: 8,
            pool_kernel: 7,
            keep_rate: 0.2,
            n: 4,
            m: 4,
            l_p: 15,
            r: 15,
            k: 8,
            n_gen: 64,
        }
    }
}

impl RankingParams {
    /// Validates every parameter against a model's layer count.
    pub fn validate(&self, num_layers: usize) -> Result<(), RankError> {
        let err = |msg: String| Err(RankError::InvalidParams(msg));
        if self.w == 0 {
            return Err(RankError::EmptyWindow);
        }
        if self.pool_kernel == 0 {
            return Err(RankError::ZeroKernel);
        }
        if self.pool_kernel % 2 == 0 {
            return Err(RankError::EvenKernel {
                kernel: self.pool_kernel,
            });
        }
        if !(self.keep_rate > 0.0 && self.keep_rate <= 1.0) {
            return Err(RankError::KeepRateOutOfRange {
                rate: self.keep_rate,
            });
        }
        if self.n == 0 {
            return err("n must be >= 1".into());
        }
        if self.l_p >= num_layers {
            return err(format!(
                "l_p {} out of range for {} layers",
                self.l_p, num_layers
            ));
        }
        if self.m > self.l_p {
            return err(format!("m {} exceeds l_p {}", self.m, self.l_p));
        }
        if self.r >= num_layers {
            return err(format!(
                "r {} out of range for {} layers",
                self.r, num_layers
            ));
        }
        if self.k == 0 {
            return err("k must be >= 1".into());
        }
        if self.n_gen == 0 {
            return err("n_gen must be >= 1".into());
        }
        Ok(())
    }
}

/// Ring buffer of the most recent `n` per-layer score vectors.
#[derive(Debug, Clone)]
pub struct LayerScoreBuffer {
    entries: VecDeque<ImportanceScores>,
    capacity: usize,
}

impl LayerScoreBuffer {
    /// Creates a buffer holding at most `n >= 1` entries.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "buffer capacity must be >= 1");
        Self {
            entries: VecDeque::with_capacity(n),
            capacity: n,
        }
    }

    /// Appends a layer's scores, evicting the oldest entry when full.
    pub fn push(&mut self, scores: ImportanceScores) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(scores);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> impl Iterator<Item = &ImportanceScores> {
        self.entries.iter()
    }
}

fn derive_heads(trace: &LayerTrace) -> (usize, usize) {
    let per = trace.len * trace.head_dim;
    (trace.queries.len() / per, trace.keys.len() / per)
}

/// Last-token query ranking: `S_i = sum_h q_last (h) . K_i (g(h)) / sqrt(d_k)`,
/// pre-softmax, using the final prompt token's query at the given layer.
pub fn gemfilter_score(trace: &ForwardTrace, layer: usize) -> Result<ImportanceScores, RankError> {
    let lt = trace
        .layer(layer)
        .ok_or(RankError::LayerNotCaptured { layer })?;
    Ok(gemfilter_score_layer(lt, layer))
}

/// [`gemfilter_score`] on a bare layer trace.
pub fn gemfilter_score_layer(lt: &LayerTrace, layer: usize) -> ImportanceScores {
    let (h, g) = derive_heads(lt);
    let hpg = h / g;
    let scale = 1.0 / (lt.head_dim as f32).sqrt();
    let mut s = vec![0.0f32; lt.len];
    for head in 0..h {
        let q_last = lt.query(head, lt.len - 1);
        let keys = lt.group_keys(head / hpg);
        for (i, sv) in s.iter_mut().enumerate() {
            let k_i = &keys[i * lt.head_dim..(i + 1) * lt.head_dim];
            *sv += crate::linalg::dot(q_last, k_i) * scale;
        }
    }
    ImportanceScores {
        values: s,
        layer_of_origin: Some(layer),
    }
}

/// Observation-window ranking: summed post-softmax attention that the last
/// `w` prompt tokens' queries pay to each position, over all heads. Each
/// window query's softmax row is causal over positions `0..=j`.
pub fn window_score(
    trace: &ForwardTrace,
    layer: usize,
    w: usize,
) -> Result<ImportanceScores, RankError> {
    let lt = trace
        .layer(layer)
        .ok_or(RankError::LayerNotCaptured { layer })?;
    window_score_layer(lt, layer, w)
}

/// [`window_score`] on a bare layer trace.
pub fn window_score_layer(
    lt: &LayerTrace,
    layer: usize,
    w: usize,
) -> Result<ImportanceScores, RankError> {
    if w == 0 {
        return Err(RankError::EmptyWindow);
    }
    if w > lt.len {
        return Err(RankError::WindowTooLarge { w, len: lt.len });
    }
    let (h, g) = derive_heads(lt);
    let hpg = h / g;
    let mut s = vec![0.0f32; lt.len];
    let mut row = vec![0.0f32; lt.len];
    for head in 0..h {
        let keys = lt.group_keys(head / hpg);
        for j in lt.len - w..lt.len {
            softmax_attention_row(&mut row[..=j], lt.query(head, j), keys, lt.head_dim);
            for (sv, rv) in s.iter_mut().zip(&row[..=j]) {
                *sv += rv;
            }
        }
    }
    Ok(ImportanceScores {
        values: s,
        layer_of_origin: Some(layer),
    })
}

/// Per-KV-group observation-window ranking: the mean over the group's query
/// heads of the window attention mass each position receives; used for
/// per-group cache compression.
pub fn kv_group_score(
    trace: &ForwardTrace,
    layer: usize,
    w: usize,
    group: usize,
) -> Result<ImportanceScores, RankError> {
    let lt = trace
        .layer(layer)
        .ok_or(RankError::LayerNotCaptured { layer })?;
    kv_group_score_layer(lt, layer, w, group)
}

/// [`kv_group_score`] on a bare layer trace.
pub fn kv_group_score_layer(
    lt: &LayerTrace,
    layer: usize,
    w: usize,
    group: usize,
) -> Result<ImportanceScores, RankError> {
    if w == 0 {
        return Err(RankError::EmptyWindow);
    }
    if w > lt.len {
        return Err(RankError::WindowTooLarge { w, len: lt.len });
    }
    let (h, g) = derive_heads(lt);
    if group >= g {
        return Err(RankError::InvalidGroup { group, groups: g });
    }
    let hpg = h / g;
    let keys = lt.group_keys(group);
    let mut s = vec![0.0f32; lt.len];
    let mut row = vec![0.0f32; lt.len];
    for head in group * hpg..(group + 1) * hpg {
        for j in lt.len - w..lt.len {
            softmax_attention_row(&mut row[..=j], lt.query(head, j), keys, lt.head_dim);
            for (sv, rv) in s.iter_mut().zip(&row[..=j]) {
                *sv += rv;
            }
        }
    }
    let inv = 1.0 / hpg as f32;
    for v in &mut s {
        *v *= inv;
    }
    Ok(ImportanceScores {
        values: s,
        layer_of_origin: Some(layer),
    })
}

/// One causal softmax attention row: scores of `query` against
/// `keys[..row.len()]`, scaled by `1/sqrt(d_k)`, softmax-normalized.
fn softmax_attention_row(row: &mut [f32], query: &[f32], keys: &[f32], head_dim: usize) {
    let scale = 1.0 / (head_dim as f32).sqrt();
    let mut max = f32::NEG_INFINITY;
    for (i, v) in row.iter_mut().enumerate() {
        *v = crate::linalg::dot(query, &keys[i * head_dim..(i + 1) * head_dim]) * scale;
        max = max.max(*v);
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Speculative lookahead ranking: the mean over `k` lookahead tokens of the
/// maximum raw attention score over every speculator layer and head:
/// `S_i = (1/k) sum_j max_{l,h} q_gen,j (l,h) . K_prompt,i (l,h) / sqrt(d_k)`.
pub fn spec_prefill_score(
    spec_trace: &ForwardTrace,
    spec_oracle: &OracleTrace,
) -> Result<ImportanceScores, RankError> {
    if spec_oracle.is_empty() {
        return Err(RankError::EmptyLookahead);
    }
    mean_of_max_raw(spec_trace, spec_oracle)
}

/// Answer-informed oracle ranking: for each generated token, the maximum
/// raw (pre-softmax) attention score to each prompt position over all
/// layers and heads; averaged over the generated answer and smoothed with
/// [`pool1d`].
pub fn oracle_score(
    prompt_trace: &ForwardTrace,
    oracle: &OracleTrace,
    pool_kernel: usize,
) -> Result<ImportanceScores, RankError> {
    if oracle.is_empty() {
        return Err(RankError::OracleUndefined);
    }
    let mean = mean_of_max_raw(prompt_trace, oracle)?;
    pool1d(&mean, pool_kernel)
}

/// Shared core of the oracle and speculative scores: mean over generated
/// tokens of the max over (layer, head) raw scores.
fn mean_of_max_raw(
    trace: &ForwardTrace,
    gen: &OracleTrace,
) -> Result<ImportanceScores, RankError> {
    let num_layers = gen.num_layers;
    let first = trace
        .layer(0)
        .ok_or(RankError::LayerNotCaptured { layer: 0 })?;
    let len = first.len;
    let dk = first.head_dim;
    let scale = 1.0 / (dk as f32).sqrt();
    let mut mean = vec![0.0f32; len];
    let mut best = vec![0.0f32; len];
    for j in 0..gen.len() {
        best.fill(f32::NEG_INFINITY);
        for l in 0..num_layers {
            let lt = trace.layer(l).ok_or(RankError::LayerNotCaptured { layer: l })?;
            let (h, g) = derive_heads(lt);
            let hpg = h / g;
            for head in 0..h {
                let q = gen.query(j, l, head);
                let keys = lt.group_keys(head / hpg);
                for (i, b) in best.iter_mut().enumerate() {
                    let raw =
                        crate::linalg::dot(q, &keys[i * dk..(i + 1) * dk]) * scale;
                    if raw > *b {
                        *b = raw;
                    }
                }
            }
        }
        for (m, b) in mean.iter_mut().zip(&best) {
            *m += b;
        }
    }
    let inv = 1.0 / gen.len() as f32;
    for v in &mut mean {
        *v *= inv;
    }
    Ok(ImportanceScores::new(mean))
}

/// Elementwise maximum over the buffered layer scores.
pub fn claa_aggregate(buffer: &LayerScoreBuffer) -> Result<ImportanceScores, RankError> {
    let mut iter = buffer.entries();
    let first = iter.next().ok_or(RankError::EmptyBuffer)?;
    let mut out = first.values.clone();
    for entry in iter {
        if entry.len() != out.len() {
            return Err(RankError::LengthMismatch {
                a: out.len(),
                b: entry.len(),
            });
        }
        for (o, &v) in out.iter_mut().zip(&entry.values) {
            if v > *o {
                *o = v;
            }
        }
    }
    Ok(ImportanceScores::new(out))
}

/// 1D average pooling with an odd kernel; edge windows shrink to in-range
/// neighbors (partial-window mean), so length and constant vectors are
/// preserved.
pub fn pool1d(scores: &ImportanceScores, kernel: usize) -> Result<ImportanceScores, RankError> {
    let values = pool1d_values(&scores.values, kernel)?;
    Ok(ImportanceScores {
        values,
        layer_of_origin: scores.layer_of_origin,
    })
}

/// [`pool1d`] on a bare slice.
pub fn pool1d_values(values: &[f32], kernel: usize) -> Result<Vec<f32>, RankError> {
    if kernel == 0 {
        return Err(RankError::ZeroKernel);
    }
    if kernel % 2 == 0 {
        return Err(RankError::EvenKernel { kernel });
    }
    let half = kernel / 2;
    let len = values.len();
    let mut out = vec![0.0f32; len];
    for i in 0..len {
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(len);
        let sum: f32 = values[lo..hi].iter().sum();
        out[i] = sum / (hi - lo) as f32;
    }
    Ok(out)
}

/// Number of tokens kept at a given rate: `max(1, round(keep_rate * L))`,
/// round-half-up.
pub fn keep_count(keep_rate: f64, len: usize) -> Result<usize, RankError> {
    if !(keep_rate > 0.0 && keep_rate <= 1.0) {
        return Err(RankError::KeepRateOutOfRange { rate: keep_rate });
    }
    let rounded = (keep_rate * len as f64 + 0.5).floor() as usize;
    Ok(rounded.max(1))
}

/// Indices of the `k` highest scores, ascending.
///
/// Ties break toward the lower index. `force_include` indices are always
/// present; the remaining slots fill by score.
pub fn topk_indices(
    scores: &ImportanceScores,
    k: usize,
    force_include: Option<&[usize]>,
) -> Result<Vec<usize>, RankError> {
    let len = scores.len();
    if k > len {
        return Err(RankError::KTooLarge { k, len });
    }
    if let Some((i, _)) = scores
        .values
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite())
    {
        return Err(RankError::NonFiniteScore { index: i });
    }
    let forced: BTreeSet<usize> = force_include.unwrap_or(&[]).iter().copied().collect();
    if forced.len() > k {
        return Err(RankError::ForceTooLarge {
            forced: forced.len(),
            k,
        });
    }
    if let Some(&bad) = forced.iter().find(|&&i| i >= len) {
        return Err(RankError::ForceOutOfRange { index: bad, len });
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_unstable_by(|&a, &b| {
        scores.values[b]
            .total_cmp(&scores.values[a])
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = forced.iter().copied().collect();
    for idx in order {
        if kept.len() == k {
            break;
        }
        if !forced.contains(&idx) {
            kept.push(idx);
        }
    }
    kept.sort_unstable();
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Builds a single-layer trace from explicit per-head tensors.
    /// `queries`/`keys` are `[heads][len][dk]` / `[groups][len][dk]`.
    fn make_trace(queries: Vec<f32>, keys: Vec<f32>, len: usize, dk: usize) -> LayerTrace {
        LayerTrace {
            queries,
            keys,
            len,
            head_dim: dk,
        }
    }

    fn seeded_trace(seed: u64, h: usize, g: usize, len: usize, dk: usize) -> LayerTrace {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let queries = (0..h * len * dk).map(|_| rng.gen::<f32>() - 0.5).collect();
        let keys = (0..g * len * dk).map(|_| rng.gen::<f32>() - 0.5).collect();
        make_trace(queries, keys, len, dk)
    }

    #[test]
    fn gemfilter_hand_example() {
        // 1 head, q_last=[1,0], keys [[1,0],[0,1]], d_k=2 -> [1/sqrt(2), 0]
        let lt = make_trace(
            vec![0.0, 0.0, 1.0, 0.0], // queries for positions 0,1; last = [1,0]
            vec![1.0, 0.0, 0.0, 1.0],
            2,
            2,
        );
        let s = gemfilter_score_layer(&lt, 0);
        assert!((s.values[0] - 1.0 / 2.0_f32.sqrt()).abs() < 1e-6);
        assert!(s.values[1].abs() < 1e-7);
        assert_eq!(s.layer_of_origin, Some(0));
    }

    #[test]
    fn gemfilter_two_identical_heads_double() {
        let one = seeded_trace(5, 1, 1, 6, 4);
        let two = make_trace(
            [one.queries.clone(), one.queries.clone()].concat(),
            [one.keys.clone(), one.keys.clone()].concat(),
            6,
            4,
        );
        let s1 = gemfilter_score_layer(&one, 0);
        let s2 = gemfilter_score_layer(&two, 0);
        for (a, b) in s1.values.iter().zip(&s2.values) {
            assert!((2.0 * a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn gemfilter_orthogonal_keys_zero() {
        // q_last = [1,0]; all keys = [0,1]
        let lt = make_trace(vec![1.0, 0.0], vec![0.0, 1.0], 1, 2);
        let s = gemfilter_score_layer(&lt, 0);
        assert_eq!(s.values, vec![0.0]);
    }

    #[test]
    fn gemfilter_linear_in_last_query() {
        let lt = seeded_trace(7, 2, 2, 5, 4);
        let mut scaled = lt.clone();
        // scale every head's last-position query by 3
        let dk = lt.head_dim;
        for head in 0..2 {
            let base = (head * lt.len + (lt.len - 1)) * dk;
            for v in &mut scaled.queries[base..base + dk] {
                *v *= 3.0;
            }
        }
        let s1 = gemfilter_score_layer(&lt, 0);
        let s2 = gemfilter_score_layer(&scaled, 0);
        for (a, b) in s1.values.iter().zip(&s2.values) {
            assert!((3.0 * a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn window_uniform_keys_split_evenly() {
        // L=2, W=1, all dot products equal -> softmax uniform -> 0.5 each,
        // summed over H=2 heads -> 1.0 each
        let lt = make_trace(
            vec![0.0; 2 * 2 * 2],
            vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5],
            2,
            2,
        );
        let s = window_score_layer(&lt, 0, 1).unwrap();
        assert!((s.values[0] - 1.0).abs() < 1e-6);
        assert!((s.values[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn window_normalization_sums_to_w() {
        // single head: each softmax row sums to 1, so sum(S) = W
        for seed in 0..5 {
            let lt = seeded_trace(seed, 1, 1, 12, 4);
            for w in [1, 3, 12] {
                let s = window_score_layer(&lt, 0, w).unwrap();
                let total: f32 = s.values.iter().sum();
                assert!(
                    (total - w as f32).abs() < 1e-5,
                    "seed {seed} w {w}: {total}"
                );
            }
        }
    }

    #[test]
    fn window_saturated_key_dominates() {
        // key 0 has huge dot products against every window query
        let len = 4;
        let dk = 2;
        let mut keys = vec![0.0f32; len * dk];
        keys[0] = 100.0; // key 0 = [100, 0]
        let queries = vec![1.0f32, 0.0].repeat(len); // every query = [1, 0]
        let lt = make_trace(queries, keys, len, dk);
        let w = 3;
        let s = window_score_layer(&lt, 0, w).unwrap();
        assert!((s.values[0] - w as f32).abs() < 1e-4);
    }

    #[test]
    fn window_rejects_oversized() {
        let lt = seeded_trace(1, 1, 1, 4, 2);
        assert!(matches!(
            window_score_layer(&lt, 0, 5),
            Err(RankError::WindowTooLarge { w: 5, len: 4 })
        ));
    }

    #[test]
    fn trace_level_missing_layer() {
        let trace = ForwardTrace::default();
        assert!(matches!(
            gemfilter_score(&trace, 3),
            Err(RankError::LayerNotCaptured { layer: 3 })
        ));
    }

    #[test]
    fn group_score_single_group_is_window_over_h() {
        let lt = seeded_trace(11, 4, 1, 8, 4);
        let ws = window_score_layer(&lt, 0, 3).unwrap();
        let gs = kv_group_score_layer(&lt, 0, 3, 0).unwrap();
        for (w, g) in ws.values.iter().zip(&gs.values) {
            assert!((w / 4.0 - g).abs() < 1e-5);
        }
    }

    #[test]
    fn group_score_singleton_groups_equal_head_scores() {
        // G = H = 2: each group score is that single head's window score
        let lt = seeded_trace(13, 2, 2, 6, 4);
        for g in 0..2 {
            let gs = kv_group_score_layer(&lt, 0, 2, g).unwrap();
            // head-g-only trace
            let dk = lt.head_dim;
            let per = lt.len * dk;
            let solo = make_trace(
                lt.queries[g * per..(g + 1) * per].to_vec(),
                lt.keys[g * per..(g + 1) * per].to_vec(),
                lt.len,
                dk,
            );
            let ws = window_score_layer(&solo, 0, 2).unwrap();
            for (a, b) in gs.values.iter().zip(&ws.values) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn group_score_swapped_heads_swap() {
        let lt = seeded_trace(17, 2, 2, 6, 4);
        let per = lt.len * lt.head_dim;
        let swapped = make_trace(
            [lt.queries[per..].to_vec(), lt.queries[..per].to_vec()].concat(),
            [lt.keys[per..].to_vec(), lt.keys[..per].to_vec()].concat(),
            lt.len,
            lt.head_dim,
        );
        let a0 = kv_group_score_layer(&lt, 0, 2, 0).unwrap();
        let b1 = kv_group_score_layer(&swapped, 0, 2, 1).unwrap();
        assert_eq!(a0.values, b1.values);
    }

    #[test]
    fn group_score_invalid_group() {
        let lt = seeded_trace(1, 2, 2, 4, 2);
        assert!(matches!(
            kv_group_score_layer(&lt, 0, 2, 5),
            Err(RankError::InvalidGroup { group: 5, groups: 2 })
        ));
    }

    fn make_gen(queries: Vec<Vec<f32>>, layers: usize, heads: usize, dk: usize) -> OracleTrace {
        OracleTrace {
            tokens: vec![1; queries.len()],
            queries,
            num_layers: layers,
            num_heads: heads,
            head_dim: dk,
        }
    }

    #[test]
    fn spec_score_degenerate_single_row() {
        // k=1, 1 layer, 1 head: reduces to one raw score row
        let mut trace = ForwardTrace::default();
        trace
            .layers
            .insert(0, make_trace(vec![0.0; 4], vec![1.0, 0.0, 0.0, 1.0], 2, 2));
        let gen = make_gen(vec![vec![1.0, 0.0]], 1, 1, 2);
        let s = spec_prefill_score(&trace, &gen).unwrap();
        assert!((s.values[0] - 1.0 / 2.0_f32.sqrt()).abs() < 1e-6);
        assert!(s.values[1].abs() < 1e-7);
    }

    #[test]
    fn spec_score_duplicate_lookahead_unchanged() {
        let mut trace = ForwardTrace::default();
        trace.layers.insert(
            0,
            make_trace(vec![0.0; 8], vec![0.3, -0.2, 0.8, 0.5, -0.4, 0.1, 0.0, 0.9], 4, 2),
        );
        let q = vec![0.7, -0.3];
        let one = spec_prefill_score(&trace, &make_gen(vec![q.clone()], 1, 1, 2)).unwrap();
        let two = spec_prefill_score(&trace, &make_gen(vec![q.clone(), q], 1, 1, 2)).unwrap();
        for (a, b) in one.values.iter().zip(&two.values) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn spec_score_max_dominance_across_layers() {
        // layer 1's raw scores strictly dominate layer 0's: result = layer 1 row
        let mut trace = ForwardTrace::default();
        let dk = 1;
        // keys chosen so q=1 gives rows [1,2] at layer 0 and [2,3] at layer 1
        trace
            .layers
            .insert(0, make_trace(vec![0.0, 0.0], vec![1.0, 2.0], 2, dk));
        trace
            .layers
            .insert(1, make_trace(vec![0.0, 0.0], vec![2.0, 3.0], 2, dk));
        let gen = make_gen(vec![vec![1.0, 1.0]], 2, 1, dk); // queries per layer
        let s = spec_prefill_score(&trace, &gen).unwrap();
        assert_eq!(s.values, vec![2.0, 3.0]);
    }

    #[test]
    fn spec_score_empty_lookahead() {
        let trace = ForwardTrace::default();
        let gen = make_gen(vec![], 1, 1, 2);
        assert!(matches!(
            spec_prefill_score(&trace, &gen),
            Err(RankError::EmptyLookahead)
        ));
    }

    #[test]
    fn oracle_degenerate_composition() {
        // 1 gen token, 1 layer, 1 head, raw row [2,1], kernel 1 -> [2,1]
        let mut trace = ForwardTrace::default();
        trace
            .layers
            .insert(0, make_trace(vec![0.0, 0.0], vec![2.0, 1.0], 2, 1));
        let gen = make_gen(vec![vec![1.0]], 1, 1, 1);
        let s = oracle_score(&trace, &gen, 1).unwrap();
        assert_eq!(s.values, vec![2.0, 1.0]);
    }

    #[test]
    fn oracle_identical_gen_tokens_match_single() {
        let mut trace = ForwardTrace::default();
        trace
            .layers
            .insert(0, make_trace(vec![0.0; 3], vec![0.5, -1.0, 2.0], 3, 1));
        let q = vec![0.8];
        let one = oracle_score(&trace, &make_gen(vec![q.clone()], 1, 1, 1), 3).unwrap();
        let two = oracle_score(&trace, &make_gen(vec![q.clone(), q], 1, 1, 1), 3).unwrap();
        for (a, b) in one.values.iter().zip(&two.values) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn oracle_empty_generation_undefined() {
        let trace = ForwardTrace::default();
        let gen = make_gen(vec![], 1, 1, 1);
        assert!(matches!(
            oracle_score(&trace, &gen, 7),
            Err(RankError::OracleUndefined)
        ));
    }

    #[test]
    fn claa_aggregate_elementwise_max() {
        let mut buf = LayerScoreBuffer::new(4);
        buf.push(ImportanceScores::new(vec![1.0, 0.0]));
        buf.push(ImportanceScores::new(vec![0.0, 2.0]));
        let agg = claa_aggregate(&buf).unwrap();
        assert_eq!(agg.values, vec![1.0, 2.0]);
    }

    #[test]
    fn claa_single_entry_identity() {
        let mut buf = LayerScoreBuffer::new(1);
        buf.push(ImportanceScores::new(vec![0.3, -0.1, 7.0]));
        let agg = claa_aggregate(&buf).unwrap();
        assert_eq!(agg.values, vec![0.3, -0.1, 7.0]);
    }

    #[test]
    fn claa_empty_buffer_and_length_mismatch() {
        let buf = LayerScoreBuffer::new(2);
        assert!(matches!(claa_aggregate(&buf), Err(RankError::EmptyBuffer)));
        let mut buf = LayerScoreBuffer::new(2);
        buf.push(ImportanceScores::new(vec![1.0]));
        buf.push(ImportanceScores::new(vec![1.0, 2.0]));
        assert!(matches!(
            claa_aggregate(&buf),
            Err(RankError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn buffer_evicts_oldest() {
        let mut buf = LayerScoreBuffer::new(2);
        buf.push(ImportanceScores::new(vec![1.0]));
        buf.push(ImportanceScores::new(vec![2.0]));
        buf.push(ImportanceScores::new(vec![3.0]));
        assert_eq!(buf.len(), 2);
        let vals: Vec<f32> = buf.entries().map(|e| e.values[0]).collect();
        assert_eq!(vals, vec![2.0, 3.0]);
    }

    #[test]
    fn pool_kernel_one_identity() {
        let s = ImportanceScores::new(vec![0.5, -2.0, 3.0]);
        assert_eq!(pool1d(&s, 1).unwrap().values, s.values);
    }

    #[test]
    fn pool_hand_example() {
        let s = ImportanceScores::new(vec![0.0, 0.0, 3.0, 0.0, 0.0]);
        assert_eq!(pool1d(&s, 3).unwrap().values, vec![0.0, 1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn pool_rejects_even_kernel() {
        let s = ImportanceScores::new(vec![1.0, 2.0]);
        assert!(matches!(
            pool1d(&s, 4),
            Err(RankError::EvenKernel { kernel: 4 })
        ));
    }

    #[test]
    fn keep_count_examples() {
        assert_eq!(keep_count(0.2, 100).unwrap(), 20);
        assert_eq!(keep_count(0.1, 4).unwrap(), 1);
        assert_eq!(keep_count(1.0, 57).unwrap(), 57);
        assert_eq!(keep_count(0.5, 3).unwrap(), 2); // round-half-up
        assert!(keep_count(0.0, 10).is_err());
        assert!(keep_count(1.5, 10).is_err());
    }

    #[test]
    fn topk_examples() {
        let s = ImportanceScores::new(vec![0.1, 0.9, 0.5]);
        assert_eq!(topk_indices(&s, 2, None).unwrap(), vec![1, 2]);
        let tied = ImportanceScores::new(vec![0.5, 0.5, 0.1]);
        assert_eq!(topk_indices(&tied, 1, None).unwrap(), vec![0]);
        let s = ImportanceScores::new(vec![0.9, 0.1, 0.2]);
        assert_eq!(topk_indices(&s, 2, Some(&[2])).unwrap(), vec![0, 2]);
    }

    #[test]
    fn topk_errors() {
        let s = ImportanceScores::new(vec![1.0, 2.0]);
        assert!(matches!(
            topk_indices(&s, 3, None),
            Err(RankError::KTooLarge { .. })
        ));
        assert!(matches!(
            topk_indices(&s, 1, Some(&[0, 1])),
            Err(RankError::ForceTooLarge { .. })
        ));
        assert!(matches!(
            topk_indices(&s, 2, Some(&[9])),
            Err(RankError::ForceOutOfRange { .. })
        ));
        let nan = ImportanceScores::new(vec![1.0, f32::NAN]);
        assert!(matches!(
            topk_indices(&nan, 1, None),
            Err(RankError::NonFiniteScore { index: 1 })
        ));
    }

    #[test]
    fn params_defaults_and_validation() {
        let p = RankingParams::default();
        assert_eq!((p.w, p.pool_kernel, p.l_p, p.n, p.m, p.k), (8, 7, 15, 4, 4, 8));
        assert!(p.validate(32).is_ok());
        assert!(p.validate(8).is_err()); // l_p out of range
        let bad = RankingParams {
            m: 20,
            ..RankingParams::default()
        };
        assert!(bad.validate(32).is_err());
        let even = RankingParams {
            pool_kernel: 4,
            ..RankingParams::default()
        };
        assert!(matches!(
            even.validate(32),
            Err(RankError::EvenKernel { kernel: 4 })
        ));
    }

    #[test]
    fn csv_serialization() {
        let s = ImportanceScores::new(vec![1.5, -0.25]);
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "index,score\n0,1.5\n1,-0.25\n");
    }

    proptest! {
        #[test]
        fn pool_preserves_length_and_constants(
            len in 1usize..40,
            half in 0usize..4,
            c in -5.0f32..5.0
        ) {
            let kernel = 2 * half + 1;
            let s = ImportanceScores::new(vec![c; len]);
            let p = pool1d(&s, kernel).unwrap();
            prop_assert_eq!(p.values.len(), len);
            for v in &p.values {
                prop_assert!((v - c).abs() < 1e-5);
            }
        }

        #[test]
        fn pool_translation_equivariant_interior(
            vals in proptest::collection::vec(-10.0f32..10.0, 20..40),
            half in 1usize..3
        ) {
            // pooling a shifted copy matches shifting pooled output, away
            // from the edges
            let kernel = 2 * half + 1;
            let shifted: Vec<f32> = std::iter::once(0.0).chain(vals.iter().copied()).collect();
            let a = pool1d_values(&vals, kernel).unwrap();
            let b = pool1d_values(&shifted, kernel).unwrap();
            for i in half + 1..vals.len() - half {
                prop_assert!((a[i] - b[i + 1]).abs() < 1e-4);
            }
        }

        #[test]
        fn topk_ascending_distinct(
            vals in proptest::collection::vec(-100.0f32..100.0, 1..50),
            frac in 0.01f64..1.0
        ) {
            let s = ImportanceScores::new(vals.clone());
            let k = keep_count(frac, vals.len()).unwrap();
            let idx = topk_indices(&s, k, None).unwrap();
            prop_assert_eq!(idx.len(), k);
            for w in idx.windows(2) {
                prop_assert!(w[0] < w[1]);
            }
        }

        #[test]
        fn topk_scale_invariant(
            vals in proptest::collection::vec(-100.0f32..100.0, 2..40),
            scale in 0.01f32..50.0
        ) {
            let s = ImportanceScores::new(vals.clone());
            let scaled = ImportanceScores::new(vals.iter().map(|v| v * scale).collect());
            let k = vals.len() / 2 + 1;
            prop_assert_eq!(
                topk_indices(&s, k, None).unwrap(),
                topk_indices(&scaled, k, None).unwrap()
            );
        }

        #[test]
        fn claa_dominates_entries(
            rows in proptest::collection::vec(
                proptest::collection::vec(-10.0f32..10.0, 8),
                1..5
            )
        ) {
            let mut buf = LayerScoreBuffer::new(rows.len());
            for r in &rows {
                buf.push(ImportanceScores::new(r.clone()));
            }
            let agg = claa_aggregate(&buf).unwrap();
            for r in &rows {
                for (a, v) in agg.values.iter().zip(r) {
                    prop_assert!(a >= v);
                }
            }
        }
    }
}
