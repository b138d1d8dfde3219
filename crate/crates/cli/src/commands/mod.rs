pub mod eval;
pub mod export;
pub mod generate;
pub mod gradcheck;
pub mod train;

use std::path::Path;

use gravityflow::checkpoint;
use gravityflow::data::{read_dataset, PanelDataset};
use gravityflow::{ConfigFile, ModelConfig};

use crate::CliError;

pub fn load_dataset(dir: &Path) -> Result<PanelDataset, CliError> {
    read_dataset(dir)
        .map_err(|e| CliError::usage(format!("cannot read dataset {}: {e}", dir.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<checkpoint::Checkpoint, CliError> {
    checkpoint::load(path)
        .map_err(|e| CliError::usage(format!("cannot load checkpoint {}: {e}", path.display())))
}

/// Defaults, then the config file, with window geometry the file leaves
/// open taken from the dataset.
pub fn resolve_config(
    path: Option<&Path>,
    panel: Option<&PanelDataset>,
) -> Result<ModelConfig, CliError> {
    let file = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
            ConfigFile::parse(&text)
                .map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?
        }
        None => ConfigFile::default(),
    };
    let mut base = ModelConfig::default();
    if let Some(ds) = panel {
        base.nodes = ds.nodes();
        base.steps_per_day = ds.meta.steps_per_day;
    }
    let cfg = file.apply(&base);
    cfg.validate()?;
    Ok(cfg)
}

/// Checkpoint and dataset must describe the same city.
pub fn check_compatible(cfg: &ModelConfig, panel: &PanelDataset) -> Result<(), CliError> {
    if cfg.nodes != panel.nodes() || cfg.steps_per_day != panel.meta.steps_per_day {
        return Err(CliError::usage(format!(
            "model expects N = {}, D = {} but the dataset has N = {}, D = {}",
            cfg.nodes,
            cfg.steps_per_day,
            panel.nodes(),
            panel.meta.steps_per_day
        )));
    }
    Ok(())
}
