//! `rank`: score prompts with each ranking method and write per-token
//! score CSVs plus kept-set summaries.
//!
//! Prompts whose oracle cannot be computed (empty generation) are reported
//! on stderr and skipped for the oracle-referenced methods; every other
//! method still runs on them.

use std::fs;
use std::fs::File;

use prefill_core::model::TokenSequence;
use prefill_core::pipelines::{oracle_ranking, run_pipeline, Method, PipelineConfig};
use prefill_core::ranking::ImportanceScores;

use crate::config::{rate_dir, write_json, Experiment, ExperimentArgs};
use crate::prompts::load_prompts;
use crate::{runtime, usage, CliError};

pub fn run(seed: Option<u64>, args: &ExperimentArgs) -> Result<(), CliError> {
    let mut exp = Experiment::resolve(seed, args)?;
    exp.require_methods()?;
    let model = super::load_experiment_model(&mut exp)?;
    let speculator = super::load_speculator(&exp)?;
    if exp.methods.contains(&Method::SpecPrefill) {
        match &speculator {
            None => return Err(usage("spec-prefill needs --speculator")),
            Some(s) if s.config.vocab_size != model.config.vocab_size => {
                return Err(usage(format!(
                    "speculator vocabulary {} differs from model vocabulary {}",
                    s.config.vocab_size, model.config.vocab_size
                )))
            }
            Some(_) => {}
        }
    }
    let prompts = load_prompts(&exp.prompt_source, model.config.vocab_size, exp.seed)?;
    let out_dir = super::command_dir(&exp.out, "rank")?;
    exp.write_manifest(&out_dir, "rank")?;

    let needs_oracle = exp
        .methods
        .iter()
        .any(|&m| matches!(m, Method::Oracle2Pass | Method::OracleEmulated));
    let mut written = 0usize;
    let mut skipped = 0usize;

    for prompt in &prompts {
        let seq = TokenSequence::new(prompt.tokens.clone());
        // one oracle per prompt, shared across methods and rates
        let oracle: Option<ImportanceScores> = if needs_oracle {
            match oracle_ranking(&model, &seq, &exp.params, exp.eos) {
                Ok(scores) => Some(scores),
                Err(e) => {
                    eprintln!(
                        "rank: skipping oracle methods for prompt {}: {e}",
                        prompt.id
                    );
                    skipped += 1;
                    None
                }
            }
        } else {
            None
        };
        for &method in &exp.methods {
            let oracle_method = matches!(method, Method::Oracle2Pass | Method::OracleEmulated);
            if oracle_method && needs_oracle && oracle.is_none() {
                continue; // reported above
            }
            for &rate in &exp.keep_rates {
                let mut params = exp.params.clone();
                params.keep_rate = rate;
                let cfg = PipelineConfig {
                    method,
                    params,
                    speculator: speculator.as_ref(),
                };
                let result = run_pipeline(&model, &seq, &cfg, oracle.as_ref()).map_err(|e| {
                    runtime(format!("{} on prompt {}: {e}", method.name(), prompt.id))
                })?;
                let dir = out_dir.join(method.name()).join(rate_dir(rate));
                fs::create_dir_all(&dir)
                    .map_err(|e| runtime(format!("creating `{}`: {e}", dir.display())))?;
                if let Some(scores) = &result.selection_scores {
                    let path = dir.join(format!("{}.scores.csv", prompt.id));
                    let file = File::create(&path)
                        .map_err(|e| runtime(format!("creating `{}`: {e}", path.display())))?;
                    scores
                        .write_csv(file)
                        .map_err(|e| runtime(format!("writing `{}`: {e}", path.display())))?;
                }
                write_json(
                    &dir.join(format!("{}.summary.json", prompt.id)),
                    &result.summary(method, rate, seq.len()),
                )?;
                written += 1;
            }
        }
    }
    eprintln!(
        "rank: {written} (method, rate, prompt) outputs under `{}` ({skipped} oracle skips)",
        out_dir.display()
    );
    Ok(())
}
