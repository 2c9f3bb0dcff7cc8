//! Deterministic random weight initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LayerWeights, Model, ModelConfig, ModelError};

/// Builds a model with seeded random weights.
///
/// Deterministic: the same `(config, seed)` yields bit-identical weights.
/// Tensors are drawn uniformly from `[-0.05, 0.05]` in serialization order
/// (`embed`, then per layer `wq, wk, wv, wo, w_gate, w_up, w_down`, then
/// `final_norm`, `lm_head`), with one exception: RMS-norm gains
/// (`attn_norm`, `ffn_norm`, `final_norm`) are initialized to 1.0, since a
/// near-zero gain collapses every activation and makes the network's
/// dynamics degenerate.
pub fn random_init_model(config: &ModelConfig, seed: u64) -> Result<Model, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |len: usize| -> Vec<f32> {
        (0..len).map(|_| rng.gen::<f32>() * 0.1 - 0.05).collect()
    };

    let d = config.d_model;
    let qd = config.num_heads * config.head_dim;
    let kd = config.num_kv_heads * config.head_dim;
    let ff = config.d_ff();

    let embed = draw(config.vocab_size * d);
    let layers = (0..config.num_layers)
        .map(|_| LayerWeights {
            wq: draw(d * qd),
            wk: draw(d * kd),
            wv: draw(d * kd),
            wo: draw(qd * d),
            w_gate: draw(d * ff),
            w_up: draw(d * ff),
            w_down: draw(ff * d),
            attn_norm: vec![1.0; d],
            ffn_norm: vec![1.0; d],
        })
        .collect();
    let lm_head = draw(d * config.vocab_size);

    Ok(Model {
        config: config.clone(),
        embed,
        layers,
        final_norm: vec![1.0; d],
        lm_head,
    })
}
