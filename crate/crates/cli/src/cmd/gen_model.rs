//! `gen-model`: write a randomly initialized model container to disk.

use std::path::PathBuf;

use clap::Args;

use prefill_core::model::{random_init_model, save_model, ModelConfig};

use crate::{runtime, usage, CliError};

#[derive(Debug, Args)]
pub struct GenModelArgs {
    /// Destination directory for the model container.
    #[arg(long)]
    pub out_path: PathBuf,
    /// Transformer depth.
    #[arg(long, default_value_t = 8)]
    pub layers: usize,
    /// Residual width.
    #[arg(long, default_value_t = 128)]
    pub d_model: usize,
    /// Attention heads.
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    /// Key/value heads (GQA groups); must divide --heads.
    #[arg(long, default_value_t = 4)]
    pub kv_heads: usize,
    /// Per-head dimension; d_model / heads when omitted.
    #[arg(long)]
    pub head_dim: Option<usize>,
    /// Vocabulary size.
    #[arg(long, default_value_t = 512)]
    pub vocab: usize,
    /// Rotary base frequency.
    #[arg(long, default_value_t = 10000.0)]
    pub rope_theta: f32,
    /// Longest supported sequence.
    #[arg(long, default_value_t = 8192)]
    pub max_position: usize,
    /// Overwrite an existing container.
    #[arg(long)]
    pub force: bool,
}

pub fn run(seed: Option<u64>, args: &GenModelArgs) -> Result<(), CliError> {
    let seed = seed.unwrap_or(0);
    let config = ModelConfig {
        num_layers: args.layers,
        d_model: args.d_model,
        num_heads: args.heads,
        num_kv_heads: args.kv_heads,
        head_dim: args
            .head_dim
            .unwrap_or_else(|| args.d_model / args.heads.max(1)),
        vocab_size: args.vocab,
        rope_theta: args.rope_theta,
        max_position: args.max_position,
    };
    // reject bad configs before touching the filesystem
    config
        .validate()
        .map_err(|e| usage(format!("model config: {e}")))?;
    if args.out_path.exists() && !args.force {
        return Err(usage(format!(
            "refusing to overwrite existing `{}`; pass --force",
            args.out_path.display()
        )));
    }
    let model = random_init_model(&config, seed)
        .map_err(|e| runtime(format!("initializing model: {e}")))?;
    save_model(&model, &args.out_path).map_err(|e| {
        runtime(format!(
            "writing container `{}`: {e}",
            args.out_path.display()
        ))
    })?;
    eprintln!(
        "gen-model: wrote {} layers / d_model {} / vocab {} (seed {seed}) to `{}`",
        config.num_layers,
        config.d_model,
        config.vocab_size,
        args.out_path.display()
    );
    Ok(())
}
