//! Greedy generation with per-step query capture, the raw material for
//! answer-informed oracle scoring.

use super::forward::decode_step;
use super::{KvCache, Model, ModelError};

/// Generated tokens plus, for each generated token, its post-rotary query
/// vectors at every layer and head.
#[derive(Debug, Clone, Default)]
pub struct OracleTrace {
    /// Generated token ids, in order (the end-of-sequence token, if hit, is
    /// not included).
    pub tokens: Vec<u32>,
    /// One record per generated token: `[num_layers][num_heads][head_dim]`
    /// flattened.
    pub queries: Vec<Vec<f32>>,
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
}

impl OracleTrace {
    /// Query vector of generated token `j` at layer `l`, head `h`.
    pub fn query(&self, j: usize, l: usize, h: usize) -> &[f32] {
        let base = (l * self.num_heads + h) * self.head_dim;
        &self.queries[j][base..base + self.head_dim]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Index of the largest logit, lowest index on ties.
pub(crate) fn argmax_lowest(logits: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedily extends a prefilled cache by up to `max_gen` tokens, recording
/// each generated token's queries at every layer.
///
/// Each step takes the argmax of the current logits (lowest token id on
/// ties); if it equals `eos_id` the loop breaks *before* recording, so an
/// immediate end-of-sequence yields an empty trace. `eos_id = None`
/// disables the stop condition.
pub fn greedy_generate(
    model: &Model,
    kv: &mut KvCache,
    last_logits: &[f32],
    max_gen: usize,
    eos_id: Option<u32>,
) -> Result<OracleTrace, ModelError> {
    let cfg = &model.config;
    let mut trace = OracleTrace {
        tokens: Vec::new(),
        queries: Vec::new(),
        num_layers: cfg.num_layers,
        num_heads: cfg.num_heads,
        head_dim: cfg.head_dim,
    };
    let mut logits = last_logits.to_vec();
    for _ in 0..max_gen {
        let tok = argmax_lowest(&logits);
        if Some(tok) == eos_id {
            break;
        }
        let mut captured = Vec::with_capacity(cfg.num_layers * cfg.num_heads * cfg.head_dim);
        logits = decode_step(model, kv, tok, Some(&mut captured))?;
        trace.tokens.push(tok);
        trace.queries.push(captured);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::super::{full_forward, random_init_model, test_config, TokenSequence};
    use super::*;

    fn prefill(seed: u64) -> (super::super::Model, KvCache, Vec<f32>) {
        let model = random_init_model(&test_config(2), seed).unwrap();
        let seq = TokenSequence::new(vec![1, 2, 3]);
        let (all, kv, _) = full_forward(&model, &seq, &[], None).unwrap();
        let vocab = model.config.vocab_size;
        let last = all[2 * vocab..].to_vec();
        (model, kv, last)
    }

    #[test]
    fn immediate_eos_yields_empty_trace() {
        let (model, mut kv, last) = prefill(1);
        let eos = argmax_lowest(&last);
        let trace = greedy_generate(&model, &mut kv, &last, 8, Some(eos)).unwrap();
        assert!(trace.is_empty());
        assert!(trace.queries.is_empty());
        assert_eq!(kv.seq_len, 3);
    }

    #[test]
    fn max_gen_bounds_generation() {
        let (model, mut kv, last) = prefill(2);
        let trace = greedy_generate(&model, &mut kv, &last, 3, None).unwrap();
        assert_eq!(trace.len(), 3);
        assert_eq!(trace.queries.len(), 3);
        let expect = model.config.num_layers * model.config.num_heads * model.config.head_dim;
        assert_eq!(trace.queries[0].len(), expect);
        assert_eq!(kv.seq_len, 6);
    }

    #[test]
    fn argmax_tie_breaks_low() {
        assert_eq!(argmax_lowest(&[0.5, 0.5, 0.1]), 0);
        assert_eq!(argmax_lowest(&[0.1, 0.9, 0.9]), 1);
    }

    #[test]
    fn generation_is_deterministic() {
        let (model, mut kv1, last) = prefill(3);
        let t1 = greedy_generate(&model, &mut kv1, &last, 5, None).unwrap();
        let (_, mut kv2, last2) = prefill(3);
        let t2 = greedy_generate(&model, &mut kv2, &last2, 5, None).unwrap();
        assert_eq!(t1.tokens, t2.tokens);
        assert_eq!(t1.queries, t2.queries);
    }
}
