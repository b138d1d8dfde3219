use std::path::{Path, PathBuf};

use gravityflow::training::{
    evaluate, evaluate_split, window_targets, HistoricalAverage, Metrics, MetricsReport,
    PreparedData, Split,
};
use gravityflow::Gravityformer;

use super::{check_compatible, load_checkpoint, load_dataset};
use crate::manifest::RunClock;
use crate::{ensure_dir, threads, CliError};

pub const MODEL_METRICS: &str = "metrics_model.csv";
pub const HA_METRICS: &str = "metrics_ha.csv";
pub const HEADER: [&str; 6] = ["split", "horizon", "rmse", "mae", "mape", "mape_excluded"];

#[derive(Clone, Copy, clap::ValueEnum)]
pub enum EvalSplit {
    Val,
    Test,
}

impl From<EvalSplit> for Split {
    fn from(s: EvalSplit) -> Split {
        match s {
            EvalSplit::Val => Split::Val,
            EvalSplit::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, clap::ValueEnum)]
pub enum Baseline {
    /// Historical average per node, time of day and weekday.
    Ha,
}

#[derive(clap::Args)]
pub struct Args {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: EvalSplit,
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    /// Window geometry for a baseline-only run.
    #[arg(long, default_value_t = 12)]
    input_len: usize,
    #[arg(long, default_value_t = 4)]
    horizon: usize,
    #[arg(long)]
    out: PathBuf,
}

fn fmt_metrics(m: &Metrics) -> [String; 4] {
    [
        format!("{}", m.rmse),
        format!("{}", m.mae),
        m.mape.map(|v| v.to_string()).unwrap_or_default(),
        m.mape_excluded.to_string(),
    ]
}

fn write_report(path: &Path, split: Split, r: &MetricsReport) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HEADER)?;
    let mut row = |h: String, m: &Metrics| -> Result<(), CliError> {
        let [rmse, mae, mape, ex] = fmt_metrics(m);
        w.write_record([split.name().to_string(), h, rmse, mae, mape, ex])?;
        Ok(())
    };
    row("all".into(), &r.overall)?;
    for (h, m) in r.per_horizon.iter().enumerate() {
        row((h + 1).to_string(), m)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

fn print_table(label: &str, r: &MetricsReport) {
    println!("{label}");
    println!(
        "  {:>8} {:>10} {:>10} {:>10}",
        "horizon", "rmse", "mae", "mape%"
    );
    let line = |h: &str, m: &Metrics| {
        let mape = m
            .mape
            .map(|v| format!("{v:.3}"))
            .unwrap_or_else(|| "-".into());
        println!("  {h:>8} {:>10.4} {:>10.4} {mape:>10}", m.rmse, m.mae);
    };
    line("all", &r.overall);
    for (h, m) in r.per_horizon.iter().enumerate() {
        line(&(h + 1).to_string(), m);
    }
}

pub fn run(a: Args) -> Result<u8, CliError> {
    let clock = RunClock::start();
    if a.checkpoint.is_none() && a.baseline.is_none() {
        return Err(CliError::usage(
            "nothing to evaluate: pass --checkpoint and/or --baseline ha",
        ));
    }
    let split: Split = a.split.into();
    let panel = load_dataset(&a.data)?;
    ensure_dir(&a.out)?;
    let mut manifest = clock.manifest("eval");
    manifest.dataset = Some(a.data.clone());

    let (q, p, data) = match &a.checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            check_compatible(&ck.config, &panel)?;
            let data = PreparedData::with_scalers(
                &panel,
                ck.config.input_len,
                ck.config.horizon,
                ck.scalers,
            )?;
            let model = Gravityformer::from_parts(ck.config.clone(), ck.params, &panel.distances)?;
            let (report, _) = evaluate_split(&model, &data, split, threads()?)?;
            let out = a.out.join(MODEL_METRICS);
            write_report(&out, split, &report)?;
            print_table(&format!("model on {}", split.name()), &report);
            manifest.seed = Some(ck.config.seed);
            manifest.config = Some(ck.config.clone());
            manifest.outputs.push(out);
            (ck.config.input_len, ck.config.horizon, data)
        }
        None => (
            a.input_len,
            a.horizon,
            PreparedData::new(&panel, a.input_len, a.horizon)?,
        ),
    };

    if a.baseline.is_some() {
        let ha = HistoricalAverage::fit(&panel, data.train_steps())?;
        let starts: Vec<usize> = data.windows(split).collect();
        let pred = ha.predict_windows(&panel.meta, &starts, q, p);
        let report = evaluate(&window_targets(&panel, &starts, q, p), &pred)?;
        let out = a.out.join(HA_METRICS);
        write_report(&out, split, &report)?;
        print_table(&format!("historical average on {}", split.name()), &report);
        manifest.outputs.push(out);
    }
    manifest.write(&a.out)?;
    Ok(0)
}
