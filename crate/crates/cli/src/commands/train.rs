use std::fs;
use std::path::PathBuf;

use gravityflow::checkpoint;
use gravityflow::training::{train, TrainOptions};
use gravityflow::ConfigFile;

use super::{load_dataset, resolve_config};
use crate::manifest::RunClock;
use crate::{ensure_dir, threads, CliError};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

#[derive(clap::Args)]
pub struct Args {
    #[arg(long)]
    data: PathBuf,
    /// TOML file of model hyperparameters and ablation switches.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    /// Initialisation and shuffling seed; overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    quiet: bool,
}

pub fn run(a: Args) -> Result<u8, CliError> {
    let clock = RunClock::start();
    let panel = load_dataset(&a.data)?;
    let mut cfg = resolve_config(a.config.as_deref(), Some(&panel))?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if a.batch_size == 0 {
        return Err(CliError::usage("--batch-size must be at least 1"));
    }
    ensure_dir(&a.out)?;
    let log_path = a.out.join(LOG_FILE);
    let opts = TrainOptions {
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: cfg.seed,
        threads: threads()?,
        log_path: Some(log_path.clone()),
        verbose: !a.quiet,
        ..TrainOptions::default()
    };
    let outcome = train(&cfg, &panel, &opts)?;
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    checkpoint::save(&ckpt_path, &outcome.checkpoint)?;
    let cfg_path = a.out.join(CONFIG_SNAPSHOT);
    fs::write(&cfg_path, ConfigFile::from_config(&cfg).to_toml())
        .map_err(|e| CliError::io(&cfg_path, e))?;

    let mut manifest = clock.manifest("train");
    manifest.config = Some(cfg.clone());
    manifest.dataset = Some(a.data.clone());
    manifest.seed = Some(cfg.seed);
    manifest.outputs = vec![ckpt_path.clone(), log_path, cfg_path];
    manifest.write(&a.out)?;

    let ck = &outcome.checkpoint;
    match (ck.best_epoch, ck.best_val_rmse) {
        (Some(e), Some(r)) => println!(
            "best epoch {e}: val rmse {r:.6}; checkpoint {}",
            ckpt_path.display()
        ),
        _ => println!("untrained checkpoint {}", ckpt_path.display()),
    }
    Ok(0)
}
