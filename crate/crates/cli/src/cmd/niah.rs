//! `niah`: generate needle-in-a-haystack retrieval prompts.
//!
//! Writes `tasks.json` (full task records: tokens, needle placement,
//! expected answer) and `prompts.txt` (one token-id line per task, directly
//! consumable as a `--prompts` file).

use std::fs;
use std::path::PathBuf;

use clap::Args;

use prefill_core::eval::{gen_niah, NiahTask};
use prefill_core::model::load_model;

use crate::config::{write_json, FileConfig};
use crate::{runtime, usage, CliError};

#[derive(Debug, Args)]
pub struct NiahArgs {
    /// JSON config supplying defaults (same schema as the experiment
    /// commands; reads niah_len / niah_depths / out / seed).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Prompt length in tokens.
    #[arg(long)]
    pub len: Option<usize>,
    /// Needle depths, each in [0, 1].
    #[arg(long, value_delimiter = ',')]
    pub depths: Option<Vec<f64>>,
    /// Vocabulary the token ids must fit.
    #[arg(long, conflicts_with = "model")]
    pub vocab: Option<usize>,
    /// Model container to read the vocabulary from instead of --vocab.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Output directory root.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(seed: Option<u64>, args: &NiahArgs) -> Result<(), CliError> {
    let file = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config `{}`: {e}", path.display())))?;
            serde_json::from_str::<FileConfig>(&text)
                .map_err(|e| usage(format!("invalid config `{}`: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };
    let seed = seed.or(file.seed).unwrap_or(0);
    let len = args
        .len
        .or(file.niah_len)
        .ok_or_else(|| usage("no length: pass --len or set \"niah_len\" in the config"))?;
    let depths = args
        .depths
        .clone()
        .or(file.niah_depths)
        .unwrap_or_else(|| vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    if depths.is_empty() {
        return Err(usage("empty depth list"));
    }
    let vocab_size = match (args.vocab, &args.model.clone().or(file.model)) {
        (Some(v), _) => v,
        (None, Some(dir)) => {
            load_model(dir)
                .map_err(|e| runtime(format!("loading model `{}`: {e}", dir.display())))?
                .config
                .vocab_size
        }
        (None, None) => return Err(usage("no vocabulary: pass --vocab N or --model DIR")),
    };

    let tasks: Vec<NiahTask> = depths
        .iter()
        .enumerate()
        .map(|(i, &depth)| {
            gen_niah(len, depth, vocab_size, seed.wrapping_add(i as u64))
                .map_err(|e| usage(format!("depth {depth}: {e}")))
        })
        .collect::<Result<_, _>>()?;

    let out = args
        .out
        .clone()
        .or(file.out)
        .unwrap_or_else(|| PathBuf::from("out"));
    let out_dir = super::command_dir(&out, "niah")?;
    write_json(&out_dir.join("tasks.json"), &tasks)?;

    let mut lines = String::new();
    for task in &tasks {
        let words: Vec<String> = task.tokens.iter().map(|t| t.to_string()).collect();
        lines.push_str(&words.join(" "));
        lines.push('\n');
    }
    let prompts_path = out_dir.join("prompts.txt");
    fs::write(&prompts_path, lines)
        .map_err(|e| runtime(format!("writing `{}`: {e}", prompts_path.display())))?;

    eprintln!(
        "niah: {} tasks of length {len} (vocab {vocab_size}, seed {seed}) under `{}`",
        tasks.len(),
        out_dir.display()
    );
    Ok(())
}
