//! Decoder-only transformer inference engine plus a prefill-acceleration
//! laboratory.
//!
//! The crate has three layers:
//!
//! * [`model`] — a minimal, deterministic decoder-only transformer with
//!   grouped-query attention, rotary positions, a per-layer KV cache, and
//!   instrumentation hooks that expose post-rotary query/key tensors.
//! * [`ranking`] — pure scoring functions that turn captured attention
//!   tensors into per-token importance scores (last-token query scores,
//!   observation-window scores, per-KV-group scores, speculative lookahead
//!   scores, answer-informed oracle scores, cross-layer max aggregation),
//!   plus pooling and top-k selection.
//! * [`pipelines`] / [`eval`] / [`bench`] — the end-to-end prefill
//!   architectures (two-pass re-forward and single-pass in-flight cache
//!   compression), rank-correlation and retrieval evaluation against the
//!   oracle, and wall-clock/memory measurement.
//!
//! Everything operates on integer token sequences; there is no tokenizer,
//! no training, and no GPU path. All arithmetic is 32-bit floating point.

pub mod bench;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod pipelines;
pub mod ranking;
