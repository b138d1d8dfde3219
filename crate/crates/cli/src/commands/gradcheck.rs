use std::path::PathBuf;
use std::time::Instant;

use gravityflow::autodiff::{FaultInjection, GradCheckConfig};
use gravityflow::diagnostics::end_to_end_gradcheck;
use gravityflow::{ConfigFile, ModelConfig};

use crate::{CliError, EXIT_RUNTIME};

#[derive(clap::Args)]
pub struct Args {
    /// TOML overrides on top of the toy configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    /// Negate every activation's backward pass; the check must then fail.
    #[arg(long)]
    inject_sign_flip: bool,
}

pub fn run(a: Args) -> Result<u8, CliError> {
    let mut cfg = ModelConfig::toy();
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        cfg = ConfigFile::parse(&text)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?
            .apply(&cfg);
        cfg.validate()?;
    }
    if !(a.step > 0.0 && a.tolerance > 0.0) {
        return Err(CliError::usage("--step and --tolerance must be positive"));
    }
    let check = GradCheckConfig {
        fault: if a.inject_sign_flip {
            FaultInjection::FlipActivationSign
        } else {
            FaultInjection::None
        },
        ..GradCheckConfig::new(a.step, a.tolerance)
    };
    let t = Instant::now();
    let report = end_to_end_gradcheck(&cfg, a.seed, &check)?;
    let worst = report
        .worst()
        .ok_or_else(|| CliError::runtime("model has no parameters"))?;
    println!(
        "precision f64, {} tensors, step {:e}: max relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e}), {:.1}s",
        report.params.len(),
        a.step,
        worst.max_rel_error,
        worst.name,
        worst.worst_index,
        worst.analytic,
        worst.numeric,
        t.elapsed().as_secs_f64()
    );
    if report.passed() {
        println!("PASS (tolerance {:e})", a.tolerance);
        Ok(0)
    } else {
        println!("FAIL (tolerance {:e})", a.tolerance);
        Ok(EXIT_RUNTIME)
    }
}
