//! Prompt loading: token-id files (one prompt per line) and the synthetic
//! retrieval generator as a second source. No tokenizer anywhere — prompts
//! are raw token ids.

use std::fs;
use std::path::PathBuf;

use serde::Serialize;

use prefill_core::eval::gen_niah;

use crate::{usage, CliError};

/// Where an experiment's prompts come from. Serialized into manifests.
#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSource {
    /// Whitespace-separated token ids, one prompt per line.
    File(PathBuf),
    /// Generated needle-in-a-haystack tasks, one per depth.
    Niah { len: usize, depths: Vec<f64> },
}

/// One prompt ready to run, with the expected answer when the source
/// provides one.
#[derive(Debug, Clone)]
pub struct LoadedPrompt {
    pub id: String,
    pub tokens: Vec<u32>,
    pub expected: Option<Vec<u32>>,
}

/// Loads every prompt from `source`, checking ids against the model's
/// vocabulary. Generated tasks draw their seeds as `seed + index`.
pub fn load_prompts(
    source: &PromptSource,
    vocab_size: usize,
    seed: u64,
) -> Result<Vec<LoadedPrompt>, CliError> {
    match source {
        PromptSource::File(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read prompts `{}`: {e}", path.display())))?;
            let mut prompts = Vec::new();
            for (lineno, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let tokens = parse_token_line(line, lineno + 1, vocab_size, path)?;
                prompts.push(LoadedPrompt {
                    id: format!("p{:03}", prompts.len()),
                    tokens,
                    expected: None,
                });
            }
            if prompts.is_empty() {
                return Err(usage(format!("no prompts in `{}`", path.display())));
            }
            Ok(prompts)
        }
        PromptSource::Niah { len, depths } => depths
            .iter()
            .enumerate()
            .map(|(i, &depth)| {
                let task = gen_niah(*len, depth, vocab_size, seed.wrapping_add(i as u64))
                    .map_err(|e| usage(format!("niah prompt at depth {depth}: {e}")))?;
                Ok(LoadedPrompt {
                    id: format!("niah{i:02}_d{depth}"),
                    tokens: task.tokens.clone(),
                    expected: Some(task.expected.clone()),
                })
            })
            .collect(),
    }
}

fn parse_token_line(
    line: &str,
    lineno: usize,
    vocab_size: usize,
    path: &std::path::Path,
) -> Result<Vec<u32>, CliError> {
    line.split_whitespace()
        .map(|word| {
            let id: u32 = word.parse().map_err(|_| {
                usage(format!(
                    "{}:{lineno}: invalid token id `{word}`",
                    path.display()
                ))
            })?;
            if id as usize >= vocab_size {
                return Err(usage(format!(
                    "{}:{lineno}: token id {id} outside vocabulary of {vocab_size}",
                    path.display()
                )));
            }
            Ok(id)
        })
        .collect()
}
