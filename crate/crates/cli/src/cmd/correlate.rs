//! `correlate`: layer-wise Spearman correlation of every ranking heuristic
//! against the answer-informed oracle, across prompts.
//!
//! Emits `rho.csv` with rows (prompt, method, layer, rho) and
//! `summary.json` with the mean per (method, layer).

use std::fs::File;

use prefill_core::eval::{correlation_summary, layerwise_correlation, write_correlation_csv};
use prefill_core::model::TokenSequence;
use prefill_core::pipelines::Method;

use crate::config::{write_json, Experiment, ExperimentArgs};
use crate::prompts::load_prompts;
use crate::{runtime, CliError};

pub fn run(seed: Option<u64>, args: &ExperimentArgs) -> Result<(), CliError> {
    let mut exp = Experiment::resolve(seed, args)?;
    if !exp.methods.is_empty() {
        eprintln!("correlate: note: --methods is ignored; the fixed heuristic set is reported");
    }
    // the manifest records what actually runs: the fixed heuristic curves
    exp.methods = vec![Method::GemFilter, Method::FastKv, Method::Claa, Method::Oracle2Pass];
    let model = super::load_experiment_model(&mut exp)?;
    let prompts = load_prompts(&exp.prompt_source, model.config.vocab_size, exp.seed)?;
    let out_dir = super::command_dir(&exp.out, "correlate")?;
    exp.write_manifest(&out_dir, "correlate")?;

    let mut reports = Vec::new();
    let mut first_error: Option<String> = None;
    for prompt in &prompts {
        let seq = TokenSequence::new(prompt.tokens.clone());
        match layerwise_correlation(&model, &seq, &prompt.id, &exp.params, exp.eos) {
            Ok(mut r) => reports.append(&mut r),
            Err(e) => {
                eprintln!("correlate: skipping prompt {}: {e}", prompt.id);
                first_error.get_or_insert_with(|| e.to_string());
            }
        }
    }
    if reports.is_empty() {
        return Err(runtime(format!(
            "correlation failed for every prompt; first error: {}",
            first_error.unwrap_or_else(|| "no prompts ran".into())
        )));
    }

    let csv_path = out_dir.join("rho.csv");
    let file = File::create(&csv_path)
        .map_err(|e| runtime(format!("creating `{}`: {e}", csv_path.display())))?;
    write_correlation_csv(&reports, file)
        .map_err(|e| runtime(format!("writing `{}`: {e}", csv_path.display())))?;
    write_json(&out_dir.join("summary.json"), &correlation_summary(&reports))?;

    eprintln!(
        "correlate: {} correlation curves over {} prompts under `{}`",
        reports.len(),
        prompts.len(),
        out_dir.display()
    );
    Ok(())
}
