//! Synthetic needle-in-a-haystack retrieval tasks: a marked payload buried
//! at a controlled depth in random filler, with a trailing query that
//! references the marker. Binary exact-match scoring.

use rand::{Rng, SeedableRng};

use super::EvalError;
use crate::model::TokenSequence;

/// Payload tokens following the needle marker.
const PAYLOAD_LEN: usize = 3;
/// Marker + payload.
const NEEDLE_LEN: usize = 1 + PAYLOAD_LEN;
/// Query-marker token + a repeat of the needle marker.
const QUERY_LEN: usize = 2;

/// One synthetic retrieval task over token ids.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NiahTask {
    /// The full prompt: filler with the needle spliced in and the query
    /// span at the end.
    pub tokens: Vec<u32>,
    pub needle_start: usize,
    pub needle_len: usize,
    /// Requested burial depth in [0, 1].
    pub depth: f64,
    /// The payload the model should reproduce.
    pub expected: Vec<u32>,
    pub query_start: usize,
    pub query_len: usize,
}

impl NiahTask {
    pub fn prompt(&self) -> TokenSequence {
        TokenSequence::new(self.tokens.clone())
    }
}

/// Generates a deterministic retrieval task of `len` total tokens.
///
/// The top two token ids are reserved: `vocab - 1` marks the needle,
/// `vocab - 2` opens the query. Filler and payload draw uniformly from the
/// unreserved ids. The needle starts at `floor(depth * len)`, clamped so
/// that needle and query always fit; at `depth = 1` the needle ends at the
/// last pre-query position.
pub fn gen_niah(
    len: usize,
    depth: f64,
    vocab_size: usize,
    seed: u64,
) -> Result<NiahTask, EvalError> {
    if !(0.0..=1.0).contains(&depth) {
        return Err(EvalError::DepthOutOfRange { depth });
    }
    if vocab_size < 4 {
        return Err(EvalError::VocabTooSmall { vocab: vocab_size });
    }
    if len < NEEDLE_LEN + QUERY_LEN {
        return Err(EvalError::PromptTooShort {
            len,
            need: NEEDLE_LEN + QUERY_LEN,
        });
    }
    let marker = (vocab_size - 1) as u32;
    let query_marker = (vocab_size - 2) as u32;
    let plain = (vocab_size - 2) as u32; // filler/payload id range

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let query_start = len - QUERY_LEN;
    let mut tokens: Vec<u32> = (0..query_start).map(|_| rng.gen_range(0..plain)).collect();
    let expected: Vec<u32> = (0..PAYLOAD_LEN).map(|_| rng.gen_range(0..plain)).collect();

    let needle_start = ((depth * len as f64).floor() as usize).min(query_start - NEEDLE_LEN);
    tokens[needle_start] = marker;
    tokens[needle_start + 1..needle_start + NEEDLE_LEN].copy_from_slice(&expected);
    tokens.push(query_marker);
    tokens.push(marker);

    Ok(NiahTask {
        tokens,
        needle_start,
        needle_len: NEEDLE_LEN,
        depth,
        expected,
        query_start,
        query_len: QUERY_LEN,
    })
}

/// Binary retrieval score: 1 iff `expected` occurs as a contiguous
/// subsequence of `generated` (vacuously 1 when `expected` is empty).
pub fn score_exact_match(generated: &[u32], expected: &[u32]) -> u32 {
    if expected.is_empty() {
        return 1;
    }
    if generated.len() < expected.len() {
        return 0;
    }
    u32::from(generated.windows(expected.len()).any(|w| w == expected))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_zero_puts_needle_first() {
        let t = gen_niah(64, 0.0, 512, 1).unwrap();
        assert_eq!(t.needle_start, 0);
        assert_eq!(t.tokens[0], 511);
        assert_eq!(&t.tokens[1..4], t.expected.as_slice());
    }

    #[test]
    fn depth_one_ends_at_last_pre_query_position() {
        let t = gen_niah(64, 1.0, 512, 2).unwrap();
        assert_eq!(t.needle_start + t.needle_len, t.query_start);
        assert_eq!(t.query_start, 62);
        assert_eq!(t.tokens[62], 510);
        assert_eq!(t.tokens[63], 511);
    }

    #[test]
    fn unclamped_depth_lands_within_one_token() {
        for (len, depth) in [(100, 0.25), (100, 0.5), (256, 0.33)] {
            let t = gen_niah(len, depth, 512, 3).unwrap();
            let ideal = (depth * len as f64).floor() as usize;
            assert!(
                t.needle_start.abs_diff(ideal) <= 1,
                "len {len} depth {depth}: start {} vs ideal {ideal}",
                t.needle_start
            );
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = gen_niah(80, 0.4, 512, 42).unwrap();
        let b = gen_niah(80, 0.4, 512, 42).unwrap();
        assert_eq!(a, b);
        let c = gen_niah(80, 0.4, 512, 43).unwrap();
        assert_ne!(a.tokens, c.tokens);
    }

    #[test]
    fn tokens_stay_in_vocab_and_markers_reserved() {
        let t = gen_niah(120, 0.7, 64, 5).unwrap();
        assert!(t.tokens.iter().all(|&tok| tok < 64));
        // markers appear only where placed
        let marker_positions: Vec<usize> = t
            .tokens
            .iter()
            .enumerate()
            .filter(|(_, &tok)| tok == 63)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(marker_positions, vec![t.needle_start, t.tokens.len() - 1]);
    }

    #[test]
    fn generation_errors() {
        assert!(matches!(
            gen_niah(64, -0.1, 512, 1),
            Err(EvalError::DepthOutOfRange { .. })
        ));
        assert!(matches!(
            gen_niah(64, 1.5, 512, 1),
            Err(EvalError::DepthOutOfRange { .. })
        ));
        assert!(matches!(
            gen_niah(4, 0.5, 512, 1),
            Err(EvalError::PromptTooShort { len: 4, need: 6 })
        ));
        assert!(matches!(
            gen_niah(64, 0.5, 3, 1),
            Err(EvalError::VocabTooSmall { vocab: 3 })
        ));
    }

    #[test]
    fn exact_match_cases() {
        assert_eq!(score_exact_match(&[1, 2, 3, 4], &[2, 3]), 1);
        assert_eq!(score_exact_match(&[1, 2, 3, 4], &[3, 2]), 0);
        assert_eq!(score_exact_match(&[1, 2], &[1, 2, 3]), 0);
        assert_eq!(score_exact_match(&[5, 6], &[]), 1);
        assert_eq!(score_exact_match(&[], &[]), 1);
        assert_eq!(score_exact_match(&[7, 8, 9], &[7, 8, 9]), 1);
    }
}
