//! Spatiotemporal adaptive embedding: calendar lookups, a sequence-shared
//! per-node table and an affine lift of the raw activity, concatenated and
//! mixed down to `c_in` channels.

use rand::Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::config::ModelConfig;
use crate::data::DatasetMeta;
use crate::error::{Error, Result};
use crate::nn::{self, Init};

pub const TIME_OF_DAY: &str = "embed.time_of_day";
pub const DAY_OF_WEEK: &str = "embed.day_of_week";
pub const HOLIDAY: &str = "embed.holiday";
pub const ADAPTIVE: &str = "embed.adaptive";
pub const FEATURE: &str = "embed.feature";
pub const OUTPUT: &str = "embed.out";

/// Calendar indices for one input window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimestampFeatures {
    pub time_of_day: Vec<usize>,
    /// Monday = 0.
    pub day_of_week: Vec<usize>,
    pub holiday: Vec<usize>,
    pub steps_per_day: usize,
}

impl TimestampFeatures {
    pub fn len(&self) -> usize {
        self.time_of_day.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time_of_day.is_empty()
    }
}

pub fn extract_timestamps(
    meta: &DatasetMeta,
    window_start: usize,
    len: usize,
) -> Result<TimestampFeatures> {
    if window_start + len > meta.steps {
        return Err(Error::Range(format!(
            "window {window_start}..{} runs past the {} recorded steps",
            window_start + len,
            meta.steps
        )));
    }
    let holidays = meta.holiday_set();
    let steps = window_start..window_start + len;
    Ok(TimestampFeatures {
        time_of_day: steps.clone().map(|t| meta.time_of_day(t)).collect(),
        day_of_week: steps.clone().map(|t| meta.day_of_week(t)).collect(),
        holiday: steps
            .map(|t| holidays.contains(&meta.date(t)) as usize)
            .collect(),
        steps_per_day: meta.steps_per_day,
    })
}

pub fn embedding_width(cfg: &ModelConfig) -> usize {
    3 * cfg.c_t + cfg.c_a + cfg.c_f
}

pub fn init_params<R: Rng>(init: &mut Init<'_, R>, cfg: &ModelConfig) -> Result<()> {
    init.xavier(TIME_OF_DAY, &[cfg.steps_per_day, cfg.c_t])?;
    init.xavier(DAY_OF_WEEK, &[7, cfg.c_t])?;
    init.xavier(HOLIDAY, &[2, cfg.c_t])?;
    init.xavier(ADAPTIVE, &[cfg.nodes, cfg.input_len, cfg.c_a])?;
    init.dense(FEATURE, cfg.in_channels, cfg.c_f)?;
    init.dense(OUTPUT, embedding_width(cfg), cfg.c_in)
}

/// `x_h` is `[B, N, q, 1]`; `ts` holds one entry per sample. Returns `Z`
/// of shape `[B, N, q, c_in]`.
pub fn embed(
    tape: &mut Tape,
    store: &ParamStore,
    x_h: Var,
    ts: &[TimestampFeatures],
) -> Result<Var> {
    let shape = tape.shape(x_h).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(
            "embed",
            format!("x_h must be [B,N,q,C], got {shape:?}"),
        ));
    }
    let (b, n, q) = (shape[0], shape[1], shape[2]);
    if ts.len() != b || ts.iter().any(|t| t.len() != q) {
        return Err(Error::shape(
            "embed",
            format!("need {b} timestamp windows of length {q}"),
        ));
    }
    let mut parts = Vec::with_capacity(5);
    let lookups: [(&str, fn(&TimestampFeatures) -> &[usize]); 3] = [
        (TIME_OF_DAY, |t| &t.time_of_day),
        (DAY_OF_WEEK, |t| &t.day_of_week),
        (HOLIDAY, |t| &t.holiday),
    ];
    for (name, field) in lookups {
        let table = tape.param(store, name)?;
        let idx: Vec<usize> = ts.iter().flat_map(|t| field(t).iter().copied()).collect();
        let rows = tape.gather(table, &idx, &[b, q])?;
        parts.push(tape.broadcast_axis(rows, 1, n)?);
    }
    let adaptive = tape.param(store, ADAPTIVE)?;
    if tape.shape(adaptive)[..2] != [n, q] {
        return Err(Error::Dimension {
            op: "embed",
            lhs: tape.shape(adaptive).to_vec(),
            rhs: vec![n, q],
        });
    }
    parts.push(tape.broadcast_axis(adaptive, 0, b)?);
    parts.push(nn::dense(tape, store, FEATURE, x_h)?);
    let cat = tape.concat(&parts, 3)?;
    nn::dense(tape, store, OUTPUT, cat)
}
