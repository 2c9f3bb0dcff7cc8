//! `bench`: TTFT and optional decode-throughput measurement per method and
//! keep rate, over a single prompt.
//!
//! Writes one `report.json` per (method, rate), a cumulative `bench.csv`,
//! and — when a sweep report already exists under the same output root —
//! the TTFT-versus-quality `scatter.csv` joining the two.

use std::fs;
use std::path::Path;

use prefill_core::bench::{bench_method, BenchError, BenchReport};
use prefill_core::eval::SweepReport;
use prefill_core::model::TokenSequence;
use prefill_core::pipelines::{Method, PipelineConfig};

use crate::config::{rate_dir, write_json, Experiment, ExperimentArgs};
use crate::prompts::load_prompts;
use crate::{runtime, usage, CliError};

pub fn run(seed: Option<u64>, args: &ExperimentArgs) -> Result<(), CliError> {
    let mut exp = Experiment::resolve(seed, args)?;
    exp.require_methods()?;
    if exp.repeats < 3 {
        return Err(usage(format!(
            "{} repeats cannot produce a median; pass --repeats 3 or more",
            exp.repeats
        )));
    }
    if let Some(steps) = exp.decode_steps {
        if steps < 16 {
            return Err(usage(format!(
                "{steps} decode steps is too noisy to time; pass --decode-steps 16 or more"
            )));
        }
    }
    let model = super::load_experiment_model(&mut exp)?;
    let speculator = super::load_speculator(&exp)?;
    if exp.methods.contains(&Method::SpecPrefill) && speculator.is_none() {
        return Err(usage("spec-prefill needs --speculator"));
    }
    let prompts = load_prompts(&exp.prompt_source, model.config.vocab_size, exp.seed)?;
    if prompts.len() != 1 {
        return Err(usage(format!(
            "bench expects exactly one prompt, got {} (timings are per-prompt)",
            prompts.len()
        )));
    }
    let seq = TokenSequence::new(prompts[0].tokens.clone());
    let out_dir = super::command_dir(&exp.out, "bench")?;
    exp.write_manifest(&out_dir, "bench")?;

    let mut csv = String::from(BenchReport::csv_header());
    csv.push('\n');
    let mut reports = Vec::new();
    for &method in &exp.methods {
        for &rate in &exp.keep_rates {
            let mut params = exp.params.clone();
            params.keep_rate = rate;
            let cfg = PipelineConfig {
                method,
                params,
                speculator: speculator.as_ref(),
            };
            let report = bench_method(&model, &seq, &cfg, rate, exp.repeats, exp.decode_steps)
                .map_err(|e| classify_bench_error(method, rate, e))?;
            eprintln!(
                "bench: {} @ {} -> ttft {:.2} ms, cache {} bytes",
                method.name(),
                rate_dir(rate),
                report.ttft.median_ms,
                report.cache_bytes
            );
            let dir = out_dir.join(method.name()).join(rate_dir(rate));
            fs::create_dir_all(&dir)
                .map_err(|e| runtime(format!("creating `{}`: {e}", dir.display())))?;
            write_json(&dir.join("report.json"), &report)?;
            csv.push_str(&report.csv_row());
            csv.push('\n');
            reports.push(report);
        }
    }
    let csv_path = out_dir.join("bench.csv");
    fs::write(&csv_path, csv)
        .map_err(|e| runtime(format!("writing `{}`: {e}", csv_path.display())))?;

    let sweep_report = exp.out.join("sweep").join("report.json");
    if sweep_report.exists() {
        write_scatter(&out_dir.join("scatter.csv"), &sweep_report, &reports)?;
        eprintln!("bench: joined sweep results into scatter.csv");
    }
    eprintln!(
        "bench: {} reports under `{}`",
        reports.len(),
        out_dir.display()
    );
    Ok(())
}

fn classify_bench_error(method: Method, rate: f64, e: BenchError) -> CliError {
    match e {
        BenchError::TooFewRepeats { .. } | BenchError::TooFewSteps { .. } => usage(e),
        other => runtime(format!("{} @ {rate}: {other}", method.name())),
    }
}

/// Emits the TTFT-versus-quality scatter: one row per benched (method,
/// rate), carrying that cell's mean retrieval score and mean oracle ρ from
/// the sweep report.
fn write_scatter(
    path: &Path,
    sweep_report: &Path,
    reports: &[BenchReport],
) -> Result<(), CliError> {
    let text = fs::read_to_string(sweep_report)
        .map_err(|e| runtime(format!("reading `{}`: {e}", sweep_report.display())))?;
    let sweep: SweepReport = serde_json::from_str(&text)
        .map_err(|e| runtime(format!("parsing `{}`: {e}", sweep_report.display())))?;

    let mut csv =
        String::from("method,keep_rate,ttft_median_ms,mean_retrieval_score,mean_rho_at_lp\n");
    for report in reports {
        let mut retrieval = MeanAcc::default();
        let mut rho = MeanAcc::default();
        for cell in sweep
            .cells
            .iter()
            .filter(|c| c.method == report.method && c.keep_rate == report.keep_rate)
        {
            if let Some(score) = cell.retrieval_score {
                retrieval.push(f64::from(score));
            }
            if let Some(r) = cell.rho_at_lp {
                rho.push(r);
            }
        }
        let fmt = |m: MeanAcc| m.mean().map_or(String::new(), |v| v.to_string());
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            report.method.name(),
            report.keep_rate,
            report.ttft.median_ms,
            fmt(retrieval),
            fmt(rho),
        ));
    }
    fs::write(path, csv).map_err(|e| runtime(format!("writing `{}`: {e}", path.display())))
}

#[derive(Default, Clone, Copy)]
struct MeanAcc {
    sum: f64,
    count: usize,
}

impl MeanAcc {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    fn mean(self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}
