//! Historical-average baseline.

use std::ops::Range;

use crate::data::{DatasetMeta, PanelDataset};
use crate::error::{Error, Result};
use crate::tensor::Array;

/// Per-node mean activity for each (time-of-day, day-of-week) slot of the
/// training steps, falling back to the node's overall training mean.
#[derive(Clone, Debug)]
pub struct HistoricalAverage {
    nodes: usize,
    steps_per_day: usize,
    slots: Vec<Option<f64>>,
    fallback: Vec<f64>,
}

impl HistoricalAverage {
    pub fn fit(panel: &PanelDataset, train_steps: Range<usize>) -> Result<Self> {
        if train_steps.is_empty() || train_steps.end > panel.steps() {
            return Err(Error::Range(format!(
                "training steps {train_steps:?} invalid for a panel of {}",
                panel.steps()
            )));
        }
        let meta = &panel.meta;
        let (n, d) = (meta.nodes, meta.steps_per_day);
        let mut sums = vec![0.0; d * 7 * n];
        let mut counts = vec![0usize; d * 7];
        let mut totals = vec![0.0; n];
        for t in train_steps.clone() {
            let slot = Self::slot(meta, t);
            counts[slot] += 1;
            for node in 0..n {
                let v = panel.activity.data()[t * n + node];
                sums[slot * n + node] += v;
                totals[node] += v;
            }
        }
        let slots = sums
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let c = counts[i / n];
                (c > 0).then(|| s / c as f64)
            })
            .collect();
        let len = train_steps.len() as f64;
        Ok(HistoricalAverage {
            nodes: n,
            steps_per_day: d,
            slots,
            fallback: totals.into_iter().map(|s| s / len).collect(),
        })
    }

    fn slot(meta: &DatasetMeta, step: usize) -> usize {
        meta.day_of_week(step) * meta.steps_per_day + meta.time_of_day(step)
    }

    pub fn predict_step(&self, meta: &DatasetMeta, step: usize, node: usize) -> f64 {
        debug_assert_eq!(meta.steps_per_day, self.steps_per_day);
        self.slots[Self::slot(meta, step) * self.nodes + node].unwrap_or(self.fallback[node])
    }

    /// `[W, N, p, 1]` forecasts for windows starting at `starts`.
    pub fn predict_windows(
        &self,
        meta: &DatasetMeta,
        starts: &[usize],
        q: usize,
        p: usize,
    ) -> Array {
        let n = self.nodes;
        let mut out = Array::zeros([starts.len(), n, p, 1]);
        for (w, &s) in starts.iter().enumerate() {
            for node in 0..n {
                for h in 0..p {
                    out.data_mut()[(w * n + node) * p + h] =
                        self.predict_step(meta, s + q + h, node);
                }
            }
        }
        out
    }
}

/// Targets `[W, N, p, 1]` for the given window starts.
pub fn window_targets(panel: &PanelDataset, starts: &[usize], q: usize, p: usize) -> Array {
    let n = panel.nodes();
    let mut out = Array::zeros([starts.len(), n, p, 1]);
    for (w, &s) in starts.iter().enumerate() {
        for node in 0..n {
            for h in 0..p {
                out.data_mut()[(w * n + node) * p + h] =
                    panel.activity.data()[(s + q + h) * n + node];
            }
        }
    }
    out
}
