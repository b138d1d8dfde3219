pub mod adam;
pub mod baseline;
pub mod metrics;
pub mod trainer;
pub mod windows;

pub use adam::{AdamConfig, AdamState};
pub use baseline::{window_targets, HistoricalAverage};
pub use metrics::{evaluate, metrics, Metrics, MetricsReport, MAPE_FLOOR};
pub use trainer::{
    evaluate_split, predict_windows, train, EpochRecord, TrainOptions, TrainOutcome,
};
pub use windows::{make_windows, window_count, PreparedData, Split, Window, WindowSplit};

#[cfg(test)]
mod tests;
