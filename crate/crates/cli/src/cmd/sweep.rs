//! `sweep`: the full prompt x method x keep-rate grid, with per-cell
//! architecture validation, oracle correlation, and retrieval scoring.
//!
//! Writes the grid as `report.csv` + `report.json`, plus one JSON file per
//! cell under `<method>/<keep_rate>/`. The exit status is nonzero exactly
//! when some cell errored; the report still lands on disk first.

use std::fs;
use std::fs::File;

use prefill_core::eval::{sweep, EvalError, SweepConfig, SweepPrompt};
use prefill_core::pipelines::{Method, PipelineError};
use prefill_core::ranking::RankError;

use crate::config::{rate_dir, write_json, Experiment, ExperimentArgs};
use crate::prompts::load_prompts;
use crate::{runtime, usage, CliError};

pub fn run(seed: Option<u64>, args: &ExperimentArgs) -> Result<(), CliError> {
    let mut exp = Experiment::resolve(seed, args)?;
    exp.require_methods()?;
    let model = super::load_experiment_model(&mut exp)?;
    let speculator = super::load_speculator(&exp)?;
    // fail before anything lands on disk, like the other commands
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
    let prompts: Vec<SweepPrompt> = load_prompts(&exp.prompt_source, model.config.vocab_size, exp.seed)?
        .into_iter()
        .map(|p| SweepPrompt {
            id: p.id,
            seq: prefill_core::model::TokenSequence::new(p.tokens),
            expected: p.expected,
        })
        .collect();
    let out_dir = super::command_dir(&exp.out, "sweep")?;
    exp.write_manifest(&out_dir, "sweep")?;

    let cfg = SweepConfig {
        params: exp.params.clone(),
        speculator: speculator.as_ref(),
        eos_id: exp.eos,
        decode_margin: 4,
    };
    let report = sweep(&model, &prompts, &exp.methods, &exp.keep_rates, &cfg)
        .map_err(classify_sweep_error)?;

    for (prompt, error) in &report.oracle_errors {
        eprintln!("sweep: no oracle for prompt {prompt}: {error}");
    }

    let csv_path = out_dir.join("report.csv");
    let file = File::create(&csv_path)
        .map_err(|e| runtime(format!("creating `{}`: {e}", csv_path.display())))?;
    report
        .write_csv(file)
        .map_err(|e| runtime(format!("writing `{}`: {e}", csv_path.display())))?;
    write_json(&out_dir.join("report.json"), &report)?;
    for cell in &report.cells {
        let dir = out_dir
            .join(cell.method.name())
            .join(rate_dir(cell.keep_rate));
        fs::create_dir_all(&dir)
            .map_err(|e| runtime(format!("creating `{}`: {e}", dir.display())))?;
        write_json(&dir.join(format!("{}.cell.json", cell.prompt_id)), cell)?;
    }

    let failed = report.cells.iter().filter(|c| c.error.is_some()).count();
    eprintln!(
        "sweep: {} cells ({} failed) under `{}`",
        report.cells.len(),
        failed,
        out_dir.display()
    );
    if failed > 0 {
        return Err(runtime(format!(
            "{failed} sweep cell(s) errored; see `{}`",
            csv_path.display()
        )));
    }
    Ok(())
}

/// Grid-shape and parameter mistakes are usage errors; anything that broke
/// mid-run is a runtime error.
fn classify_sweep_error(e: EvalError) -> CliError {
    match &e {
        EvalError::EmptyGrid(_) => usage(e),
        EvalError::Pipeline(PipelineError::MissingSpeculator) => {
            usage(format!("{e}: pass --speculator or drop {}", Method::SpecPrefill))
        }
        EvalError::Pipeline(PipelineError::VocabMismatch { .. }) => usage(e),
        EvalError::Pipeline(PipelineError::Rank(
            RankError::InvalidParams(_)
            | RankError::KeepRateOutOfRange { .. }
            | RankError::EvenKernel { .. }
            | RankError::ZeroKernel
            | RankError::EmptyWindow,
        )) => usage(e),
        _ => runtime(e),
    }
}
