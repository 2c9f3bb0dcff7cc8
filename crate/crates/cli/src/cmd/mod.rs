//! One module per subcommand. Each `run` takes the global seed and its
//! parsed arguments, writes files under `<out>/<command>/…`, and reports
//! progress on stderr.

pub mod bench;
pub mod correlate;
pub mod gen_model;
pub mod niah;
pub mod rank;
pub mod sweep;

use std::path::{Path, PathBuf};

use prefill_core::model::{load_model, Model};

use crate::config::Experiment;
use crate::{runtime, CliError};

/// Loads the experiment's model and fits the layer-indexed parameters to
/// its depth. The common prologue of every experiment command.
pub(crate) fn load_experiment_model(exp: &mut Experiment) -> Result<Model, CliError> {
    let model = load_model(&exp.model_dir)
        .map_err(|e| runtime(format!("loading model `{}`: {e}", exp.model_dir.display())))?;
    exp.fit_params(model.config.num_layers)?;
    Ok(model)
}

/// Loads the speculator when configured.
pub(crate) fn load_speculator(exp: &Experiment) -> Result<Option<Model>, CliError> {
    exp.speculator_dir
        .as_ref()
        .map(|dir| {
            load_model(dir)
                .map_err(|e| runtime(format!("loading speculator `{}`: {e}", dir.display())))
        })
        .transpose()
}

/// Creates `<out>/<command>` (parents included) and returns it.
pub(crate) fn command_dir(out: &Path, command: &str) -> Result<PathBuf, CliError> {
    let dir = out.join(command);
    std::fs::create_dir_all(&dir)
        .map_err(|e| runtime(format!("creating `{}`: {e}", dir.display())))?;
    Ok(dir)
}
