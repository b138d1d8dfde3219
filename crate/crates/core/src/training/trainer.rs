//! Mini-batch training with best-validation retention.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{AdamConfig, AdamState};
use super::metrics::{evaluate, Metrics, MetricsReport};
use super::windows::{PreparedData, Split};
use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::data::PanelDataset;
use crate::error::{Error, Result};
use crate::model::Gravityformer;
use crate::tensor::Array;

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    /// Shuffling seed; parameter initialisation uses `config.seed`.
    pub seed: u64,
    pub adam: AdamConfig,
    /// Worker threads for validation passes.
    pub threads: usize,
    /// Per-epoch CSV log.
    pub log_path: Option<PathBuf>,
    pub verbose: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 200,
            batch_size: 16,
            seed: 0,
            adam: AdamConfig::default(),
            threads: 1,
            log_path: None,
            verbose: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Metrics of the predictions made during the epoch, before each update.
    pub train: Metrics,
    pub val: Metrics,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

pub const LOG_HEADER: &str = "epoch,split,rmse,mae,mape,seconds";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn log_rows(r: &EpochRecord) -> [String; 2] {
    let row = |split: &str, m: &Metrics| {
        format!(
            "{},{split},{},{},{},{:.3}",
            r.epoch,
            m.rmse,
            m.mae,
            fmt_opt(m.mape),
            r.seconds
        )
    };
    [row("train", &r.train), row("val", &r.val)]
}

/// Forecasts `[W, N, p, 1]` for window starts, batched and optionally
/// spread over `threads` workers. Output is independent of the thread count.
pub fn predict_windows(
    model: &Gravityformer,
    data: &PreparedData,
    starts: &[usize],
    batch_size: usize,
    threads: usize,
) -> Result<Array> {
    let (n, p) = (model.config.nodes, model.config.horizon);
    let batches: Vec<&[usize]> = starts.chunks(batch_size.max(1)).collect();
    let run = |group: &[&[usize]]| -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for b in group {
            let batch = data.batch(b)?;
            out.extend_from_slice(model.predict(&batch, data.scalers.activity)?.data());
        }
        Ok(out)
    };
    let threads = threads.clamp(1, batches.len().max(1));
    let data_out = if threads == 1 {
        run(&batches)?
    } else {
        let per = batches.len().div_ceil(threads);
        let parts: Vec<Result<Vec<f64>>> = std::thread::scope(|s| {
            let handles: Vec<_> = batches
                .chunks(per)
                .map(|g| s.spawn(move || run(g)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect()
        });
        let mut all = Vec::with_capacity(starts.len() * n * p);
        for part in parts {
            all.extend(part?);
        }
        all
    };
    Array::new([starts.len(), n, p, 1], data_out)
}

/// Model forecasts and metrics on one split.
pub fn evaluate_split(
    model: &Gravityformer,
    data: &PreparedData,
    split: Split,
    threads: usize,
) -> Result<(MetricsReport, Array)> {
    let starts: Vec<usize> = data.windows(split).collect();
    let preds = predict_windows(model, data, &starts, 16, threads)?;
    let targets =
        super::baseline::window_targets(&data.panel, &starts, data.input_len, data.horizon);
    Ok((evaluate(&targets, &preds)?, preds))
}

fn round_params(model: &mut Gravityformer) {
    for (_, a) in model.params.iter_mut() {
        a.round_to_f32();
    }
}

pub fn train(
    config: &ModelConfig,
    panel: &PanelDataset,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if config.nodes != panel.nodes() || config.steps_per_day != panel.meta.steps_per_day {
        return Err(Error::Config(format!(
            "config expects N = {}, D = {} but the dataset has N = {}, D = {}",
            config.nodes,
            config.steps_per_day,
            panel.nodes(),
            panel.meta.steps_per_day
        )));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let data = PreparedData::new(panel, config.input_len, config.horizon)?;
    let mut model = Gravityformer::new(config.clone(), &panel.distances)?;
    let mut adam = AdamState::new(&model.params, opts.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut log = match &opts.log_path {
        Some(path) => {
            let f = File::create(path).map_err(|e| Error::io(path, e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{LOG_HEADER}").map_err(|e| Error::io(path, e))?;
            Some((w, path.clone()))
        }
        None => None,
    };

    let mut best = Checkpoint {
        config: config.clone(),
        params: model.params.clone(),
        scalers: data.scalers,
        best_epoch: None,
        best_val_rmse: None,
    };
    let mut history = Vec::with_capacity(opts.epochs);
    let mut order: Vec<usize> = data.windows(Split::Train).collect();
    let (n, p) = (config.nodes, config.horizon);
    for epoch in 1..=opts.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut y_all = Vec::with_capacity(order.len() * n * p);
        let mut pred_all = Vec::with_capacity(order.len() * n * p);
        for (step, starts) in order.chunks(opts.batch_size).enumerate() {
            let batch = data.batch(starts)?;
            let mut tape = Tape::new();
            let (trace, loss) = model
                .loss_with(&mut tape, &model.params, &batch, data.scalers.activity)
                .map_err(|e| divergence(e, epoch, step))?;
            let l = tape.value(loss).item()?;
            if !l.is_finite() {
                return Err(Error::Numeric {
                    context: format!("training loss at epoch {epoch}, step {step}"),
                });
            }
            y_all.extend_from_slice(batch.y.data());
            pred_all.extend_from_slice(tape.value(trace.prediction).data());
            let grads = tape.backward(loss, &model.params)?;
            drop(tape);
            adam.step(&mut model.params, &grads)
                .map_err(|e| divergence(e, epoch, step))?;
            round_params(&mut model);
        }
        let train_metrics = super::metrics::metrics(&y_all, &pred_all)?;
        let (val, _) = evaluate_split(&model, &data, Split::Val, opts.threads)?;
        let record = EpochRecord {
            epoch,
            train: train_metrics,
            val: val.overall,
            seconds: started.elapsed().as_secs_f64(),
        };
        if opts.verbose {
            eprintln!(
                "epoch {epoch:>3}  train mae {:.4}  val rmse {:.4}  mae {:.4}  ({:.1}s)",
                record.train.mae, record.val.rmse, record.val.mae, record.seconds
            );
        }
        if let Some((w, path)) = log.as_mut() {
            for row in log_rows(&record) {
                writeln!(w, "{row}").map_err(|e| Error::io(path.as_path(), e))?;
            }
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        if best.best_val_rmse.is_none_or(|b| record.val.rmse < b) {
            best.params = model.params.clone();
            best.best_epoch = Some(epoch);
            best.best_val_rmse = Some(record.val.rmse);
        }
        history.push(record);
    }
    Ok(TrainOutcome {
        checkpoint: best,
        history,
    })
}

fn divergence(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::Numeric { context } => Error::Numeric {
            context: format!("{context} (epoch {epoch}, step {step})"),
        },
        other => other,
    }
}
