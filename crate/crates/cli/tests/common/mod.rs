//! Shared fixtures for the acceptance suites: desk-scale model builders,
//! seeded prompts, and an independent naive transformer forward used as a
//! reference oracle against the engine.

#![allow(dead_code)] // each acceptance target uses its own subset

use prefill_core::model::{random_init_model, Model, ModelConfig, TokenSequence, RMS_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Builds a config in the desk-model family: `head_dim = d_model / heads`,
/// conventional rotary base, generous position budget.
pub fn model_config(
    layers: usize,
    d_model: usize,
    heads: usize,
    kv_heads: usize,
    vocab: usize,
) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        d_model,
        num_heads: heads,
        num_kv_heads: kv_heads,
        head_dim: d_model / heads,
        vocab_size: vocab,
        rope_theta: 10_000.0,
        max_position: 8192,
    }
}

pub fn desk_model(
    layers: usize,
    d_model: usize,
    heads: usize,
    kv_heads: usize,
    vocab: usize,
    seed: u64,
) -> Model {
    random_init_model(&model_config(layers, d_model, heads, kv_heads, vocab), seed)
        .expect("valid desk config")
}

/// A seeded uniform-random prompt of `len` tokens.
pub fn random_prompt(len: usize, vocab: usize, seed: u64) -> TokenSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TokenSequence::new((0..len).map(|_| rng.gen_range(0..vocab as u32)).collect())
}

/// Largest absolute difference between two equal-length vectors.
pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

/// Independent multi-head-attention forward pass: plain nested loops, no
/// shared kernels with the engine, every head owning its own KV head.
/// Returns row-major logits `[len][vocab]`. Only models with
/// `num_kv_heads == num_heads` are meaningful here — the point is to check
/// the engine's grouped-attention machinery against group-free attention.
pub fn naive_mha_logits(model: &Model, tokens: &[u32]) -> Vec<f32> {
    let cfg = &model.config;
    assert_eq!(
        cfg.num_kv_heads, cfg.num_heads,
        "the naive reference implements ungrouped attention"
    );
    let len = tokens.len();
    let d = cfg.d_model;
    let h = cfg.num_heads;
    let dk = cfg.head_dim;
    let ff = cfg.d_ff();

    let mut x: Vec<Vec<f32>> = tokens
        .iter()
        .map(|&t| model.embed[t as usize * d..(t as usize + 1) * d].to_vec())
        .collect();

    for lw in &model.layers {
        // attention block
        let normed: Vec<Vec<f32>> = x.iter().map(|row| rms(row, &lw.attn_norm)).collect();
        let mut q = vec![vec![0.0f32; h * dk]; len];
        let mut k = vec![vec![0.0f32; h * dk]; len];
        let mut v = vec![vec![0.0f32; h * dk]; len];
        for i in 0..len {
            q[i] = matvec(&normed[i], &lw.wq, d, h * dk);
            k[i] = matvec(&normed[i], &lw.wk, d, h * dk);
            v[i] = matvec(&normed[i], &lw.wv, d, h * dk);
            for head in 0..h {
                rope(&mut q[i][head * dk..(head + 1) * dk], i, cfg.rope_theta);
                rope(&mut k[i][head * dk..(head + 1) * dk], i, cfg.rope_theta);
            }
        }
        for i in 0..len {
            let mut ctx = vec![0.0f32; h * dk];
            for head in 0..h {
                let qi = &q[i][head * dk..(head + 1) * dk];
                // causal scores over positions 0..=i
                let mut scores: Vec<f32> = (0..=i)
                    .map(|j| {
                        let kj = &k[j][head * dk..(head + 1) * dk];
                        qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>()
                            / (dk as f32).sqrt()
                    })
                    .collect();
                softmax(&mut scores);
                for (j, &p) in scores.iter().enumerate() {
                    let vj = &v[j][head * dk..(head + 1) * dk];
                    for (c, &val) in ctx[head * dk..(head + 1) * dk].iter_mut().zip(vj) {
                        *c += p * val;
                    }
                }
            }
            let proj = matvec(&ctx, &lw.wo, h * dk, d);
            for (xv, pv) in x[i].iter_mut().zip(&proj) {
                *xv += pv;
            }
        }
        // feed-forward block
        for row in x.iter_mut() {
            let n = rms(row, &lw.ffn_norm);
            let gate = matvec(&n, &lw.w_gate, d, ff);
            let up = matvec(&n, &lw.w_up, d, ff);
            let hidden: Vec<f32> = gate
                .iter()
                .zip(&up)
                .map(|(&g, &u)| g / (1.0 + (-g).exp()) * u)
                .collect();
            let down = matvec(&hidden, &lw.w_down, ff, d);
            for (xv, dv) in row.iter_mut().zip(&down) {
                *xv += dv;
            }
        }
    }

    let mut logits = Vec::with_capacity(len * cfg.vocab_size);
    for row in &x {
        let n = rms(row, &model.final_norm);
        logits.extend(matvec(&n, &model.lm_head, d, cfg.vocab_size));
    }
    logits
}

fn rms(x: &[f32], gain: &[f32]) -> Vec<f32> {
    let mean_sq = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (mean_sq + RMS_EPS).sqrt();
    x.iter().zip(gain).map(|(&v, &g)| v * inv * g).collect()
}

/// `y = x @ w` for a row-major `w[rows][cols]`.
fn matvec(x: &[f32], w: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut y = vec![0.0f32; cols];
    for (r, &xv) in x.iter().enumerate().take(rows) {
        let row = &w[r * cols..(r + 1) * cols];
        for (yv, &wv) in y.iter_mut().zip(row) {
            *yv += xv * wv;
        }
    }
    y
}

fn rope(x: &mut [f32], position: usize, theta: f32) {
    let d = x.len();
    for t in 0..d / 2 {
        let freq = theta.powf(-(2.0 * t as f32) / d as f32);
        let (sin, cos) = (position as f32 * freq).sin_cos();
        let (a, b) = (x[2 * t], x[2 * t + 1]);
        x[2 * t] = a * cos - b * sin;
        x[2 * t + 1] = a * sin + b * cos;
    }
}

fn softmax(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
