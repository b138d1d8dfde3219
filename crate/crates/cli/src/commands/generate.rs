use std::fs;
use std::path::PathBuf;

use gravityflow::data::dataset::{
    ACTIVITY_FILE, DISTANCES_FILE, INFLOW_FILE, META_FILE, OUTFLOW_FILE, TRUE_GRAVITY_FILE,
};
use gravityflow::data::synthetic::{DEFAULT_DAYS, DEFAULT_NODES};
use gravityflow::data::{generate_scenario, simulate, write_dataset, ScenarioOverrides};

use crate::manifest::RunClock;
use crate::{ensure_dir, CliError};

pub const SCENARIO_FILE: &str = "scenario.json";

#[derive(clap::Args)]
pub struct Args {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_NODES)]
    nodes: usize,
    #[arg(long, default_value_t = DEFAULT_DAYS)]
    days: usize,
    #[arg(long)]
    out: PathBuf,
    /// Write into a non-empty directory.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    beta_true: Option<f64>,
    /// Mean stay in steps.
    #[arg(long)]
    stay_mean: Option<f64>,
    /// Departure-rate multiplier.
    #[arg(long)]
    rate_scale: Option<f64>,
    #[arg(long)]
    steps_per_day: Option<usize>,
    /// Spread of the lognormal node masses.
    #[arg(long)]
    mass_sigma: Option<f64>,
}

pub fn run(a: Args) -> Result<u8, CliError> {
    let clock = RunClock::start();
    if a.nodes < 2 {
        return Err(CliError::usage(format!(
            "--nodes must be at least 2, got {}",
            a.nodes
        )));
    }
    if a.days < 1 {
        return Err(CliError::usage("--days must be at least 1"));
    }
    let occupied = fs::read_dir(&a.out)
        .map(|mut d| d.next().is_some())
        .unwrap_or(false);
    if occupied && !a.force {
        return Err(CliError::usage(format!(
            "{} exists and is not empty; pass --force to overwrite",
            a.out.display()
        )));
    }
    let overrides = ScenarioOverrides {
        beta_true: a.beta_true,
        stay_mean: a.stay_mean,
        rate_scale: a.rate_scale,
        steps_per_day: a.steps_per_day,
        mass_sigma: a.mass_sigma,
        ..ScenarioOverrides::default()
    };
    let scenario = generate_scenario(a.seed, a.nodes, a.days, &overrides)?;
    let panel = simulate(&scenario);

    ensure_dir(&a.out)?;
    write_dataset(&a.out, &panel)?;
    let scenario_path = a.out.join(SCENARIO_FILE);
    let text = serde_json::to_string_pretty(&scenario).expect("scenario serialises");
    fs::write(&scenario_path, text + "\n").map_err(|e| CliError::io(&scenario_path, e))?;

    let mut manifest = clock.manifest("generate");
    manifest.dataset = Some(a.out.clone());
    manifest.seed = Some(a.seed);
    manifest.outputs = [
        META_FILE,
        ACTIVITY_FILE,
        INFLOW_FILE,
        OUTFLOW_FILE,
        DISTANCES_FILE,
        TRUE_GRAVITY_FILE,
        SCENARIO_FILE,
    ]
    .iter()
    .map(|f| a.out.join(f))
    .collect();
    manifest.write(&a.out)?;

    println!(
        "generated N = {}, S = {}, mean activity = {:.3} into {}",
        panel.nodes(),
        panel.steps(),
        panel.activity.mean(),
        a.out.display()
    );
    Ok(0)
}
