//! Sliding windows, the chronological split and batch assembly.

use std::ops::Range;

use crate::data::PanelDataset;
use crate::embedding::{extract_timestamps, TimestampFeatures};
use crate::error::{Error, Result};
use crate::model::Batch;
use crate::scaler::{Scalers, ZScoreScaler};
use crate::tensor::Array;

/// One raw (un-normalised) window.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub start: usize,
    /// `[N, q]` activity.
    pub x_h: Array,
    pub x_in: Array,
    pub x_out: Array,
    /// `[N, p]` activity after the input steps.
    pub y: Array,
    pub timestamps: TimestampFeatures,
}

pub fn window_count(steps: usize, q: usize, p: usize) -> Result<usize> {
    if q == 0 || p == 0 || steps < q + p {
        return Err(Error::Range(format!(
            "panel of {steps} steps is too short for q = {q}, p = {p}"
        )));
    }
    Ok(steps - q - p + 1)
}

fn node_major(series: &Array, start: usize, len: usize) -> Array {
    let n = series.shape()[1];
    let mut out = Array::zeros([n, len]);
    for node in 0..n {
        for t in 0..len {
            out.data_mut()[node * len + t] = series.data()[(start + t) * n + node];
        }
    }
    out
}

/// Every stride-1 window of `panel`.
pub fn make_windows(panel: &PanelDataset, q: usize, p: usize) -> Result<Vec<Window>> {
    let count = window_count(panel.steps(), q, p)?;
    (0..count)
        .map(|start| {
            Ok(Window {
                start,
                x_h: node_major(&panel.activity, start, q),
                x_in: node_major(&panel.inflow, start, q),
                x_out: node_major(&panel.outflow, start, q),
                y: node_major(&panel.activity, start + q, p),
                timestamps: extract_timestamps(&panel.meta, start, q)?,
            })
        })
        .collect()
}

/// Contiguous window-index ranges in chronological order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowSplit {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl WindowSplit {
    /// 7:1:2 over `count` windows; train and validation round down.
    pub fn chronological(count: usize) -> Result<Self> {
        let train = count * 7 / 10;
        let val = count / 10;
        if train == 0 || val == 0 || count - train - val == 0 {
            return Err(Error::Range(format!(
                "{count} windows cannot be split 7:1:2"
            )));
        }
        Ok(WindowSplit {
            train: 0..train,
            val: train..train + val,
            test: train + val..count,
        })
    }

    pub fn get(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (train, val, test)"
            ))),
        }
    }
}

/// A panel with fitted scalers, ready to serve batches.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub panel: PanelDataset,
    pub input_len: usize,
    pub horizon: usize,
    pub split: WindowSplit,
    pub scalers: Scalers,
    norm_activity: Array,
    norm_inflow: Array,
    norm_outflow: Array,
}

fn normalise(series: &Array, s: ZScoreScaler) -> Array {
    series.map(|x| s.apply(x))
}

impl PreparedData {
    /// Split the windows and fit one scaler per series on the steps the
    /// training windows cover.
    pub fn new(panel: &PanelDataset, q: usize, p: usize) -> Result<Self> {
        let split = WindowSplit::chronological(window_count(panel.steps(), q, p)?)?;
        let steps = Self::train_steps_of(&split, q, p);
        let n = panel.nodes();
        let fit =
            |a: &Array| ZScoreScaler::fit(a.data()[steps.start * n..steps.end * n].iter().copied());
        let scalers = Scalers {
            activity: fit(&panel.activity)?,
            inflow: fit(&panel.inflow)?,
            outflow: fit(&panel.outflow)?,
        };
        Self::with_scalers(panel, q, p, scalers)
    }

    pub fn with_scalers(
        panel: &PanelDataset,
        q: usize,
        p: usize,
        scalers: Scalers,
    ) -> Result<Self> {
        let split = WindowSplit::chronological(window_count(panel.steps(), q, p)?)?;
        Ok(PreparedData {
            norm_activity: normalise(&panel.activity, scalers.activity),
            norm_inflow: normalise(&panel.inflow, scalers.inflow),
            norm_outflow: normalise(&panel.outflow, scalers.outflow),
            panel: panel.clone(),
            input_len: q,
            horizon: p,
            split,
            scalers,
        })
    }

    fn train_steps_of(split: &WindowSplit, q: usize, p: usize) -> Range<usize> {
        0..split.train.end - 1 + q + p
    }

    /// Panel steps touched by training windows (inputs and targets).
    pub fn train_steps(&self) -> Range<usize> {
        Self::train_steps_of(&self.split, self.input_len, self.horizon)
    }

    pub fn windows(&self, split: Split) -> Range<usize> {
        self.split.get(split)
    }

    /// Batch of the given window starts.
    pub fn batch(&self, starts: &[usize]) -> Result<Batch> {
        let (n, q, p) = (self.panel.nodes(), self.input_len, self.horizon);
        let b = starts.len();
        let mut x_h = Array::zeros([b, n, q, 1]);
        let mut x_in = Array::zeros([b, n, q, 1]);
        let mut x_out = Array::zeros([b, n, q, 1]);
        let mut y = Array::zeros([b, n, p, 1]);
        let mut timestamps = Vec::with_capacity(b);
        for (i, &s) in starts.iter().enumerate() {
            if s + q + p > self.panel.steps() {
                return Err(Error::Range(format!("window {s} runs past the panel end")));
            }
            for node in 0..n {
                for t in 0..q {
                    let src = (s + t) * n + node;
                    let dst = (i * n + node) * q + t;
                    x_h.data_mut()[dst] = self.norm_activity.data()[src];
                    x_in.data_mut()[dst] = self.norm_inflow.data()[src];
                    x_out.data_mut()[dst] = self.norm_outflow.data()[src];
                }
                for t in 0..p {
                    y.data_mut()[(i * n + node) * p + t] =
                        self.panel.activity.data()[(s + q + t) * n + node];
                }
            }
            timestamps.push(extract_timestamps(&self.panel.meta, s, q)?);
        }
        Ok(Batch {
            x_h,
            x_in,
            x_out,
            timestamps,
            y,
        })
    }
}
