//! Minimal deterministic decoder-only transformer: configuration, weight
//! container, forward pass with instrumentation hooks, KV cache, and greedy
//! generation.
//!
//! The architecture is the standard pre-norm decoder stack: RMS-normalized
//! grouped-query attention with rotary positions, followed by an
//! RMS-normalized gated (SiLU) feed-forward block, with residual connections
//! around both. All tensors are 32-bit floats stored row-major in plain
//! vectors; every shape is fully determined by [`ModelConfig`].

mod cache;
mod forward;
mod generate;
mod init;
mod io;
mod rope;

pub use cache::{GroupCache, KvCache, LayerCache};
pub use forward::{
    attention_scores, decode_step, full_forward, softmax_rows, CompressHook, ForwardTrace,
    LayerTrace,
};
pub(crate) use forward::{
    run_prefill, CacheKeep, Directive, EngineOptions, LayerCtx, LayerObserver, NoopObserver,
    PrefillOutput,
};
pub(crate) use generate::argmax_lowest;
pub use generate::{greedy_generate, OracleTrace};
pub use init::random_init_model;
pub use io::{load_model, save_model};
pub use rope::apply_rope;

use serde::{Deserialize, Serialize};

/// RMS-normalization epsilon used everywhere in the stack.
pub const RMS_EPS: f32 = 1e-5;

/// Errors raised by model construction, loading, and the forward pass.
#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("token id {token} out of range (vocab_size {vocab})")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("position id {position} exceeds max_position {max}")]
    PositionOverflow { position: usize, max: usize },
    #[error("token/position length mismatch: {tokens} tokens vs {positions} positions")]
    SequenceLengthMismatch { tokens: usize, positions: usize },
    #[error("position ids must be strictly increasing (found {prev} then {next})")]
    PositionsNotIncreasing { prev: usize, next: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("tensor {name} missing")]
    MissingTensor { name: String },
    #[error("tensor {name} shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("malformed container: {0}")]
    MalformedContainer(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Architecture hyperparameters of a model.
///
/// Field names are the on-disk `config.json` schema; `d_model` must equal
/// `num_heads * head_dim`, and `num_heads` must be divisible by
/// `num_kv_heads`. Query head `h` is served by KV group
/// `h / (num_heads / num_kv_heads)`.
///
/// The feed-forward hidden width is not a free parameter: it is fixed at
/// `4 * d_model` (see [`ModelConfig::d_ff`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub rope_theta: f32,
    pub max_position: usize,
}

impl ModelConfig {
    /// Validates every structural invariant, returning a description of the
    /// first violation.
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.num_layers == 0
            || self.d_model == 0
            || self.num_heads == 0
            || self.num_kv_heads == 0
            || self.head_dim == 0
            || self.vocab_size == 0
            || self.max_position == 0
        {
            return err("all counts must be >= 1".into());
        }
        if self.num_heads % self.num_kv_heads != 0 {
            return err(format!(
                "num_heads {} not divisible by num_kv_heads {}",
                self.num_heads, self.num_kv_heads
            ));
        }
        if self.d_model != self.num_heads * self.head_dim {
            return err(format!(
                "d_model {} != num_heads {} * head_dim {}",
                self.d_model, self.num_heads, self.head_dim
            ));
        }
        if !(self.rope_theta > 0.0) {
            return err(format!("rope_theta {} must be positive", self.rope_theta));
        }
        Ok(())
    }

    /// Feed-forward hidden width (fixed at the conventional `4 * d_model`).
    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    /// Number of query heads per KV group.
    pub fn heads_per_group(&self) -> usize {
        self.num_heads / self.num_kv_heads
    }

    /// KV group serving query head `h`.
    pub fn group_of_head(&self, h: usize) -> usize {
        h / self.heads_per_group()
    }
}

/// Weights of one decoder layer. Projection matrices are row-major with
/// input dimension as rows, so activations multiply from the left:
/// `y = x @ w`.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    /// `[d_model][num_heads * head_dim]`
    pub wq: Vec<f32>,
    /// `[d_model][num_kv_heads * head_dim]`
    pub wk: Vec<f32>,
    /// `[d_model][num_kv_heads * head_dim]`
    pub wv: Vec<f32>,
    /// `[num_heads * head_dim][d_model]`
    pub wo: Vec<f32>,
    /// `[d_model][d_ff]`
    pub w_gate: Vec<f32>,
    /// `[d_model][d_ff]`
    pub w_up: Vec<f32>,
    /// `[d_ff][d_model]`
    pub w_down: Vec<f32>,
    /// `[d_model]` pre-attention RMS gain
    pub attn_norm: Vec<f32>,
    /// `[d_model]` pre-FFN RMS gain
    pub ffn_norm: Vec<f32>,
}

/// A complete model: configuration plus every named weight tensor.
///
/// Immutable after construction and safe to share across threads; forward
/// passes mutate only their own caches and traces.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    /// `[vocab_size][d_model]` token embedding table.
    pub embed: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    /// `[d_model]` final RMS gain.
    pub final_norm: Vec<f32>,
    /// `[d_model][vocab_size]` output projection.
    pub lm_head: Vec<f32>,
}

/// A token sequence paired with the position ids the tokens occupy.
///
/// After pruning, `position_ids` remain the kept tokens' ORIGINAL positions
/// (a strictly increasing subsequence of `0..L`), so rotary rotations are
/// identical to the unpruned run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub position_ids: Vec<usize>,
}

impl TokenSequence {
    /// A fresh prompt occupying positions `0..tokens.len()`.
    pub fn new(tokens: Vec<u32>) -> Self {
        let position_ids = (0..tokens.len()).collect();
        Self {
            tokens,
            position_ids,
        }
    }

    /// The subsequence at `indices` (ascending), keeping original positions.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            tokens: indices.iter().map(|&i| self.tokens[i]).collect(),
            position_ids: indices.iter().map(|&i| self.position_ids[i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Validates tokens and positions against a config.
    pub fn validate(&self, config: &ModelConfig) -> Result<(), ModelError> {
        if self.tokens.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if self.tokens.len() != self.position_ids.len() {
            return Err(ModelError::SequenceLengthMismatch {
                tokens: self.tokens.len(),
                positions: self.position_ids.len(),
            });
        }
        for &t in &self.tokens {
            if t as usize >= config.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    token: t,
                    vocab: config.vocab_size,
                });
            }
        }
        for w in self.position_ids.windows(2) {
            if w[1] <= w[0] {
                return Err(ModelError::PositionsNotIncreasing {
                    prev: w[0],
                    next: w[1],
                });
            }
        }
        if let Some(&last) = self.position_ids.last() {
            if last >= config.max_position {
                return Err(ModelError::PositionOverflow {
                    position: last,
                    max: config.max_position,
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) fn test_config(num_layers: usize) -> ModelConfig {
    ModelConfig {
        num_layers,
        d_model: 32,
        num_heads: 4,
        num_kv_heads: 2,
        head_dim: 8,
        vocab_size: 64,
        rope_theta: 10_000.0,
        max_position: 4096,
    }
}
