//! Experiment configuration: flag parsing, JSON config files, and the
//! merge of the two into one resolved, manifest-ready description.
//!
//! Precedence is flags over file over built-in defaults, so a config file
//! can pin a whole experiment while any single field stays overridable
//! from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use prefill_core::pipelines::Method;
use prefill_core::ranking::RankingParams;

use crate::prompts::PromptSource;
use crate::{runtime, usage, CliError};

/// Flags shared by `rank`, `correlate`, `sweep`, and `bench`. Every field
/// mirrors one experiment-config field; unset flags fall back to the
/// `--config` file, then to defaults.
#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// JSON config supplying defaults for any other flag.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model container directory (from `gen-model`).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Speculator container directory (required by spec-prefill).
    #[arg(long)]
    pub speculator: Option<PathBuf>,
    /// Prompt file: one prompt per line, whitespace-separated token ids.
    #[arg(long, conflicts_with = "niah_len")]
    pub prompts: Option<PathBuf>,
    /// Generate needle-in-a-haystack prompts of this length instead of
    /// reading a file.
    #[arg(long)]
    pub niah_len: Option<usize>,
    /// Needle depths for generated prompts, each in [0, 1].
    #[arg(long, value_delimiter = ',')]
    pub niah_depths: Option<Vec<f64>>,
    /// Ranking methods to run, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Keep rates to run, comma-separated, each in (0, 1].
    #[arg(long, value_delimiter = ',')]
    pub keep_rates: Option<Vec<f64>>,
    /// Output directory root.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Observation window width (last-w queries).
    #[arg(long)]
    pub window: Option<usize>,
    /// Score pooling kernel, odd.
    #[arg(long)]
    pub pool_kernel: Option<usize>,
    /// Cross-layer aggregation window.
    #[arg(long)]
    pub agg_window: Option<usize>,
    /// First compressed layer; earlier layers keep their full cache.
    #[arg(long)]
    pub defer_layer: Option<usize>,
    /// Pruning layer; defaults to num_layers / 2 when the built-in
    /// default does not fit the loaded model.
    #[arg(long)]
    pub prune_layer: Option<usize>,
    /// Query layer for two-pass ranking; same auto-fit as --prune-layer.
    #[arg(long)]
    pub route_layer: Option<usize>,
    /// Speculator lookahead length.
    #[arg(long)]
    pub lookahead: Option<usize>,
    /// Oracle generation cap.
    #[arg(long)]
    pub gen_len: Option<usize>,
    /// End-of-sequence token id for oracle generation.
    #[arg(long)]
    pub eos: Option<u32>,
    /// Timing repeats (bench; at least 3).
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Decode steps for throughput measurement (bench; at least 16).
    #[arg(long)]
    pub decode_steps: Option<usize>,
}

/// JSON config file schema: the same fields as the flags, all optional.
/// Unknown keys are rejected so typos surface as usage errors.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub model: Option<PathBuf>,
    pub speculator: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub niah_len: Option<usize>,
    pub niah_depths: Option<Vec<f64>>,
    pub methods: Option<Vec<String>>,
    pub keep_rates: Option<Vec<f64>>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub window: Option<usize>,
    pub pool_kernel: Option<usize>,
    pub agg_window: Option<usize>,
    pub defer_layer: Option<usize>,
    pub prune_layer: Option<usize>,
    pub route_layer: Option<usize>,
    pub lookahead: Option<usize>,
    pub gen_len: Option<usize>,
    pub eos: Option<u32>,
    pub repeats: Option<usize>,
    pub decode_steps: Option<usize>,
}

impl FileConfig {
    fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config `{}`: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| usage(format!("invalid config `{}`: {e}", path.display())))
    }
}

/// Fallback depth grid for generated retrieval prompts.
const DEFAULT_DEPTHS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// A fully resolved experiment: what actually runs, and what the manifest
/// records.
#[derive(Debug)]
pub struct Experiment {
    pub model_dir: PathBuf,
    pub speculator_dir: Option<PathBuf>,
    pub prompt_source: PromptSource,
    pub methods: Vec<Method>,
    pub keep_rates: Vec<f64>,
    pub out: PathBuf,
    pub seed: u64,
    pub params: RankingParams,
    pub eos: Option<u32>,
    pub repeats: usize,
    pub decode_steps: Option<usize>,
    /// Whether l_p / r / m were pinned by the user (file or flag); unpinned
    /// values auto-fit to the loaded model's depth.
    pinned_prune_layer: bool,
    pinned_route_layer: bool,
    pinned_defer_layer: bool,
}

impl Experiment {
    /// Merges flags over the optional config file and validates everything
    /// that can be checked before a model is loaded.
    pub fn resolve(global_seed: Option<u64>, args: &ExperimentArgs) -> Result<Self, CliError> {
        let file = match &args.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };

        let model_dir = args
            .model
            .clone()
            .or(file.model.clone())
            .ok_or_else(|| usage("no model: pass --model or set \"model\" in the config"))?;

        let prompt_source = resolve_prompt_source(args, &file)?;

        // parsed when given; `correlate` runs a fixed heuristic set, so the
        // commands that do need methods enforce presence themselves
        let methods = match args.methods.clone().or(file.methods) {
            Some(names) => parse_methods(&names)?,
            None => Vec::new(),
        };

        let keep_rates = args
            .keep_rates
            .clone()
            .or(file.keep_rates)
            .unwrap_or_else(|| vec![RankingParams::default().keep_rate]);
        if keep_rates.is_empty() {
            return Err(usage("empty keep-rate list"));
        }
        for &rate in &keep_rates {
            if !(rate.is_finite() && rate > 0.0 && rate <= 1.0) {
                return Err(usage(format!("keep rate {rate} outside (0, 1]")));
            }
        }

        let mut params = RankingParams::default();
        let pick = |flag: Option<usize>, file: Option<usize>| flag.or(file);
        if let Some(w) = pick(args.window, file.window) {
            params.w = w;
        }
        if let Some(k) = pick(args.pool_kernel, file.pool_kernel) {
            params.pool_kernel = k;
        }
        if let Some(n) = pick(args.agg_window, file.agg_window) {
            params.n = n;
        }
        let defer = pick(args.defer_layer, file.defer_layer);
        if let Some(m) = defer {
            params.m = m;
        }
        let prune = pick(args.prune_layer, file.prune_layer);
        if let Some(l_p) = prune {
            params.l_p = l_p;
        }
        let route = pick(args.route_layer, file.route_layer);
        if let Some(r) = route {
            params.r = r;
        }
        if let Some(k) = pick(args.lookahead, file.lookahead) {
            params.k = k;
        }
        if let Some(n_gen) = pick(args.gen_len, file.gen_len) {
            params.n_gen = n_gen;
        }

        let repeats = args.repeats.or(file.repeats).unwrap_or(5);

        Ok(Experiment {
            model_dir,
            speculator_dir: args.speculator.clone().or(file.speculator),
            prompt_source,
            methods,
            keep_rates,
            out: args
                .out
                .clone()
                .or(file.out)
                .unwrap_or_else(|| PathBuf::from("out")),
            seed: global_seed.or(file.seed).unwrap_or(0),
            params,
            eos: args.eos.or(file.eos),
            repeats,
            decode_steps: args.decode_steps.or(file.decode_steps),
            pinned_prune_layer: prune.is_some(),
            pinned_route_layer: route.is_some(),
            pinned_defer_layer: defer.is_some(),
        })
    }

    /// Errors unless the experiment names at least one method.
    pub fn require_methods(&self) -> Result<(), CliError> {
        if self.methods.is_empty() {
            return Err(usage(
                "no methods: pass --methods or set \"methods\" in the config",
            ));
        }
        Ok(())
    }

    /// Fits unpinned layer indices to the loaded model — the built-in
    /// defaults suit deep models, so shallower ones fall back to the
    /// halfway layer — then validates the final parameter set.
    pub fn fit_params(&mut self, num_layers: usize) -> Result<(), CliError> {
        if !self.pinned_prune_layer && self.params.l_p >= num_layers {
            self.params.l_p = num_layers / 2;
        }
        if !self.pinned_route_layer && self.params.r >= num_layers {
            self.params.r = num_layers / 2;
        }
        if !self.pinned_defer_layer && self.params.m > self.params.l_p {
            self.params.m = self.params.l_p;
        }
        self.params
            .validate(num_layers)
            .map_err(|e| usage(format!("ranking parameters: {e}")))
    }

    /// Writes `manifest.json` under `dir`, recording the full resolved
    /// configuration for provenance.
    pub fn write_manifest(&self, dir: &Path, command: &str) -> Result<(), CliError> {
        let manifest = Manifest {
            command,
            model: &self.model_dir,
            speculator: self.speculator_dir.as_deref(),
            prompt_source: &self.prompt_source,
            methods: self.methods.iter().map(|m| m.name()).collect(),
            keep_rates: &self.keep_rates,
            seed: self.seed,
            eos: self.eos,
            params: &self.params,
            repeats: self.repeats,
            decode_steps: self.decode_steps,
        };
        write_json(&dir.join("manifest.json"), &manifest)
    }
}

/// The provenance record dropped next to every command's outputs.
#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    model: &'a Path,
    speculator: Option<&'a Path>,
    prompt_source: &'a PromptSource,
    methods: Vec<&'a str>,
    keep_rates: &'a [f64],
    seed: u64,
    eos: Option<u32>,
    params: &'a RankingParams,
    repeats: usize,
    decode_steps: Option<usize>,
}

fn resolve_prompt_source(
    args: &ExperimentArgs,
    file: &FileConfig,
) -> Result<PromptSource, CliError> {
    // A prompt flag overrides the whole source choice from the file;
    // depths merge with the usual flag-over-file precedence.
    let (prompts, niah_len) = if args.prompts.is_some() || args.niah_len.is_some() {
        (args.prompts.clone(), args.niah_len)
    } else {
        (file.prompts.clone(), file.niah_len)
    };
    let niah_depths = args.niah_depths.clone().or(file.niah_depths.clone());
    match (prompts, niah_len) {
        (Some(_), Some(_)) => Err(usage(
            "both a prompt file and --niah-len given; choose one prompt source",
        )),
        (Some(path), None) => Ok(PromptSource::File(path)),
        (None, Some(len)) => Ok(PromptSource::Niah {
            len,
            depths: depths_or_default(niah_depths)?,
        }),
        (None, None) => Err(usage(
            "no prompt source: pass --prompts FILE or --niah-len N",
        )),
    }
}

fn depths_or_default(depths: Option<Vec<f64>>) -> Result<Vec<f64>, CliError> {
    let depths = depths.unwrap_or_else(|| DEFAULT_DEPTHS.to_vec());
    if depths.is_empty() {
        return Err(usage("empty needle-depth list"));
    }
    for &d in &depths {
        if !(d.is_finite() && (0.0..=1.0).contains(&d)) {
            return Err(usage(format!("needle depth {d} outside [0, 1]")));
        }
    }
    Ok(depths)
}

/// Parses method names, rejecting unknown ones with the valid list.
pub fn parse_methods(names: &[String]) -> Result<Vec<Method>, CliError> {
    if names.is_empty() {
        return Err(usage("empty method list"));
    }
    names
        .iter()
        .map(|name| {
            Method::from_name(name).ok_or_else(|| {
                let valid: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                usage(format!(
                    "unknown method `{name}`; valid: {}",
                    valid.join(", ")
                ))
            })
        })
        .collect()
}

/// Directory component for one keep rate: plain decimal, no locale, no
/// trailing zeros (`0.2`, `0.25`, `1`).
pub fn rate_dir(rate: f64) -> String {
    format!("{rate}")
}

/// Serializes `value` as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| runtime(format!("serializing `{}`: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| runtime(format!("writing `{}`: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    #[derive(Debug, Parser)]
    struct Harness {
        #[command(flatten)]
        args: ExperimentArgs,
    }

    fn parse(line: &str) -> ExperimentArgs {
        let argv: Vec<&str> = std::iter::once("harness")
            .chain(line.split_whitespace())
            .collect();
        Harness::try_parse_from(argv).expect(line).args
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("exp.json");
        std::fs::write(
            &cfg,
            r#"{"model":"from-file","methods":["full-kv"],"prompts":"p.txt","keep_rates":[0.5],"seed":7}"#,
        )
        .unwrap();
        let args = parse(&format!(
            "--config {} --model from-flag --keep-rates 0.1,0.2",
            cfg.display()
        ));
        let exp = Experiment::resolve(None, &args).unwrap();
        assert_eq!(exp.model_dir, PathBuf::from("from-flag"));
        assert_eq!(exp.keep_rates, vec![0.1, 0.2]);
        assert_eq!(exp.seed, 7);
        assert_eq!(exp.methods, vec![Method::FullKv]);
    }

    #[test]
    fn global_seed_beats_file_seed() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("exp.json");
        std::fs::write(
            &cfg,
            r#"{"model":"m","methods":["claa"],"prompts":"p.txt","seed":7}"#,
        )
        .unwrap();
        let args = parse(&format!("--config {}", cfg.display()));
        assert_eq!(Experiment::resolve(Some(3), &args).unwrap().seed, 3);
        assert_eq!(Experiment::resolve(None, &args).unwrap().seed, 7);
    }

    #[test]
    fn unknown_config_key_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("exp.json");
        std::fs::write(&cfg, r#"{"modle":"typo"}"#).unwrap();
        let args = parse(&format!("--config {} --model m", cfg.display()));
        let err = Experiment::resolve(None, &args).unwrap_err();
        assert!(matches!(err, CliError::Usage(_)), "{err}");
    }

    #[test]
    fn unknown_method_lists_valid_names() {
        let args = parse("--model m --prompts p --methods gemfilter,nonsense");
        let err = Experiment::resolve(None, &args).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("nonsense"), "{msg}");
        assert!(msg.contains("full-kv"), "{msg}");
        assert!(msg.contains("claa"), "{msg}");
    }

    #[test]
    fn prompt_source_requires_exactly_one_kind() {
        let err = Experiment::resolve(None, &parse("--model m --methods claa")).unwrap_err();
        assert!(err.to_string().contains("no prompt source"), "{err}");
        // clap itself rejects the two flags standing together
        let argv = [
            "harness",
            "--model",
            "m",
            "--methods",
            "claa",
            "--prompts",
            "p",
            "--niah-len",
            "64",
        ];
        assert!(Harness::try_parse_from(argv).is_err());
    }

    #[test]
    fn keep_rate_bounds_checked_early() {
        let args = parse("--model m --prompts p --methods claa --keep-rates 0.0");
        assert!(matches!(
            Experiment::resolve(None, &args),
            Err(CliError::Usage(_))
        ));
        let args = parse("--model m --prompts p --methods claa --keep-rates 1.5");
        assert!(matches!(
            Experiment::resolve(None, &args),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn layer_params_fit_shallow_models_unless_pinned() {
        let args = parse("--model m --prompts p --methods claa");
        let mut exp = Experiment::resolve(None, &args).unwrap();
        exp.fit_params(8).unwrap();
        assert_eq!(exp.params.l_p, 4);
        assert_eq!(exp.params.r, 4);
        assert_eq!(exp.params.m, 4);

        // a 2-layer model pulls m down with the auto-fitted l_p
        let mut exp = Experiment::resolve(None, &args).unwrap();
        exp.fit_params(2).unwrap();
        assert_eq!(exp.params.l_p, 1);
        assert_eq!(exp.params.m, 1);

        // pinned values are never silently moved
        let args = parse("--model m --prompts p --methods claa --prune-layer 20");
        let mut exp = Experiment::resolve(None, &args).unwrap();
        let err = exp.fit_params(8).unwrap_err();
        assert!(matches!(err, CliError::Usage(_)), "{err}");
    }

    #[test]
    fn deep_models_keep_the_builtin_defaults() {
        let args = parse("--model m --prompts p --methods claa");
        let mut exp = Experiment::resolve(None, &args).unwrap();
        exp.fit_params(32).unwrap();
        assert_eq!(exp.params.l_p, 15);
        assert_eq!(exp.params.r, 15);
    }

    #[test]
    fn rate_dir_is_stable_and_short() {
        assert_eq!(rate_dir(0.2), "0.2");
        assert_eq!(rate_dir(0.25), "0.25");
        assert_eq!(rate_dir(1.0), "1");
    }
}
