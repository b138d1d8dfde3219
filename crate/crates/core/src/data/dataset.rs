//! Panel datasets and their on-disk directory layout.
//!
//! A dataset directory holds `meta.json` plus raw little-endian `f32`
//! files, row-major:
//!
//! | file               | shape   |
//! |--------------------|---------|
//! | `activity.f32`     | `[S,N]` |
//! | `inflow.f32`       | `[S,N]` |
//! | `outflow.f32`      | `[S,N]` |
//! | `distances.f32`    | `[N,N]` |
//! | `true_gravity.f32` | `[N,N]` (optional, synthetic data only) |

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Datelike, Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Array;

pub const DATASET_FORMAT_VERSION: u32 = 1;

pub const META_FILE: &str = "meta.json";
pub const ACTIVITY_FILE: &str = "activity.f32";
pub const INFLOW_FILE: &str = "inflow.f32";
pub const OUTFLOW_FILE: &str = "outflow.f32";
pub const DISTANCES_FILE: &str = "distances.f32";
pub const TRUE_GRAVITY_FILE: &str = "true_gravity.f32";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeInfo {
    pub id: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Units {
    pub distance: String,
    pub coords: String,
    pub counts: String,
}

impl Default for Units {
    fn default() -> Self {
        Units {
            distance: "km".into(),
            coords: "xy_km".into(),
            counts: "visitors_per_step".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    #[serde(rename = "N")]
    pub nodes: usize,
    #[serde(rename = "S")]
    pub steps: usize,
    #[serde(rename = "D")]
    pub steps_per_day: usize,
    /// Weekday of step 0, Monday = 0.
    pub start_weekday: u32,
    pub start_date: NaiveDate,
    pub holiday_dates: Vec<NaiveDate>,
    pub node_info: Vec<NodeInfo>,
    pub units: Units,
}

impl DatasetMeta {
    pub fn day_index(&self, step: usize) -> usize {
        step / self.steps_per_day
    }

    pub fn time_of_day(&self, step: usize) -> usize {
        step % self.steps_per_day
    }

    pub fn day_of_week(&self, step: usize) -> usize {
        (self.start_weekday as usize + self.day_index(step)) % 7
    }

    pub fn date(&self, step: usize) -> NaiveDate {
        self.start_date + Duration::days(self.day_index(step) as i64)
    }

    pub fn holiday_set(&self) -> BTreeSet<NaiveDate> {
        self.holiday_dates.iter().copied().collect()
    }

    pub fn is_holiday(&self, step: usize) -> bool {
        self.holiday_dates.contains(&self.date(step))
    }

    pub fn coords(&self) -> Vec<(f64, f64)> {
        self.node_info.iter().map(|n| (n.x, n.y)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PanelDataset {
    pub meta: DatasetMeta,
    /// `[S, N]` visitor counts present at each step.
    pub activity: Array,
    pub inflow: Array,
    pub outflow: Array,
    /// `[N, N]` pairwise distances.
    pub distances: Array,
    /// `[N, N]` mean realised origin-destination flow (synthetic only).
    pub true_gravity: Option<Array>,
}

impl PanelDataset {
    pub fn nodes(&self) -> usize {
        self.meta.nodes
    }

    pub fn steps(&self) -> usize {
        self.meta.steps
    }

    pub fn validate(&self) -> Result<()> {
        let (s, n) = (self.meta.steps, self.meta.nodes);
        let check = |name: &str, a: &Array, want: [usize; 2]| -> Result<()> {
            if a.shape() != want {
                return Err(Error::Manifest {
                    path: PathBuf::from(name),
                    detail: format!("shape {:?}, meta says {:?}", a.shape(), want),
                });
            }
            Ok(())
        };
        check(ACTIVITY_FILE, &self.activity, [s, n])?;
        check(INFLOW_FILE, &self.inflow, [s, n])?;
        check(OUTFLOW_FILE, &self.outflow, [s, n])?;
        check(DISTANCES_FILE, &self.distances, [n, n])?;
        if let Some(g) = &self.true_gravity {
            check(TRUE_GRAVITY_FILE, g, [n, n])?;
        }
        if self.meta.node_info.len() != n {
            return Err(Error::Manifest {
                path: PathBuf::from(META_FILE),
                detail: format!("{} node entries for N = {n}", self.meta.node_info.len()),
            });
        }
        if self.meta.steps_per_day == 0 || self.meta.start_weekday > 6 {
            return Err(Error::Manifest {
                path: PathBuf::from(META_FILE),
                detail: "D must be >= 1 and start_weekday in 0..7".into(),
            });
        }
        let weekday = self.meta.start_date.weekday().num_days_from_monday();
        if weekday != self.meta.start_weekday {
            return Err(Error::Manifest {
                path: PathBuf::from(META_FILE),
                detail: format!(
                    "start_date {} is weekday {weekday}, start_weekday says {}",
                    self.meta.start_date, self.meta.start_weekday
                ),
            });
        }
        let d = self.distances.data();
        for i in 0..n {
            if d[i * n + i] != 0.0 {
                return Err(Error::Manifest {
                    path: PathBuf::from(DISTANCES_FILE),
                    detail: format!("non-zero diagonal at node {i}"),
                });
            }
            for j in 0..i {
                if d[i * n + j] != d[j * n + i] || d[i * n + j] < 0.0 {
                    return Err(Error::Manifest {
                        path: PathBuf::from(DISTANCES_FILE),
                        detail: format!("entries ({i},{j}) not symmetric and non-negative"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Series for node `node` over steps `start..start+len` of a `[S, N]` array.
    pub fn column_window(series: &Array, node: usize, start: usize, len: usize) -> Vec<f64> {
        let n = series.shape()[1];
        (start..start + len)
            .map(|t| series.data()[t * n + node])
            .collect()
    }
}

fn write_f32(path: &Path, a: &Array) -> Result<()> {
    let mut bytes = Vec::with_capacity(a.len() * 4);
    for &v in a.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32(path: &Path, shape: [usize; 2]) -> Result<Array> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let want = shape[0] * shape[1] * 4;
    if bytes.len() != want {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            detail: format!(
                "{} bytes, expected {want} for shape {:?}",
                bytes.len(),
                shape
            ),
        });
    }
    let mut data = Vec::with_capacity(want / 4);
    for (index, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(Error::NonFinite {
                path: path.to_path_buf(),
                index,
            });
        }
        data.push(v as f64);
    }
    Array::new(shape.to_vec(), data)
}

pub fn write_dataset(dir: &Path, ds: &PanelDataset) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = serde_json::to_string_pretty(&ds.meta).expect("meta serialises");
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, meta + "\n").map_err(|e| Error::io(&meta_path, e))?;
    write_f32(&dir.join(ACTIVITY_FILE), &ds.activity)?;
    write_f32(&dir.join(INFLOW_FILE), &ds.inflow)?;
    write_f32(&dir.join(OUTFLOW_FILE), &ds.outflow)?;
    write_f32(&dir.join(DISTANCES_FILE), &ds.distances)?;
    if let Some(g) = &ds.true_gravity {
        write_f32(&dir.join(TRUE_GRAVITY_FILE), g)?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<PanelDataset> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: meta_path.clone(),
        detail: e.to_string(),
    })?;
    let version = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Manifest {
            path: meta_path.clone(),
            detail: "missing format_version".into(),
        })?;
    if version != DATASET_FORMAT_VERSION as u64 {
        return Err(Error::Version {
            found: version as u32,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let meta: DatasetMeta = serde_json::from_value(raw).map_err(|e| Error::Manifest {
        path: meta_path.clone(),
        detail: e.to_string(),
    })?;
    let (s, n) = (meta.steps, meta.nodes);
    let activity = read_f32(&dir.join(ACTIVITY_FILE), [s, n])?;
    let inflow = read_f32(&dir.join(INFLOW_FILE), [s, n])?;
    let outflow = read_f32(&dir.join(OUTFLOW_FILE), [s, n])?;
    let distances = read_f32(&dir.join(DISTANCES_FILE), [n, n])?;
    let tg_path = dir.join(TRUE_GRAVITY_FILE);
    let true_gravity = if tg_path.exists() {
        Some(read_f32(&tg_path, [n, n])?)
    } else {
        None
    };
    let ds = PanelDataset {
        meta,
        activity,
        inflow,
        outflow,
        distances,
        true_gravity,
    };
    ds.validate()?;
    Ok(ds)
}
