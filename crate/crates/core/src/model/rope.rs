//! Rotary position embedding, interleaved-pair convention.
//!
//! Head dimensions are grouped into consecutive pairs `(2t, 2t+1)`; pair `t`
//! of a vector at position `p` is rotated by angle
//! `p * theta^(-2t / head_dim)`. Rotations are always applied at a token's
//! ORIGINAL position id, so pruned sequences produce bit-comparable keys.

/// Rotates one head vector `x` (length `head_dim`, even) in place.
pub fn apply_rope(x: &mut [f32], position: usize, theta: f32) {
    let d = x.len();
    debug_assert!(d % 2 == 0, "head_dim must be even for rotary pairs");
    let pos = position as f32;
    for t in 0..d / 2 {
        let freq = theta.powf(-(2.0 * t as f32) / d as f32);
        let angle = pos * freq;
        let (sin, cos) = angle.sin_cos();
        let a = x[2 * t];
        let b = x[2 * t + 1];
        x[2 * t] = a * cos - b * sin;
        x[2 * t + 1] = a * sin + b * cos;
    }
}
