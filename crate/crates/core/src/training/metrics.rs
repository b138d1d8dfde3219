//! RMSE, MAE and floor-guarded MAPE.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Array;

/// Targets with `|y|` below this are left out of MAPE.
pub const MAPE_FLOOR: f64 = 1.0;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Sums {
    sq: f64,
    abs: f64,
    ape: f64,
    n: usize,
    n_mape: usize,
}

impl Sums {
    fn push(&mut self, y: f64, y_hat: f64, floor: f64) {
        let e = y_hat - y;
        self.sq += e * e;
        self.abs += e.abs();
        self.n += 1;
        if y.abs() >= floor {
            self.ape += (e / y).abs();
            self.n_mape += 1;
        }
    }

    fn finish(&self) -> Metrics {
        let n = self.n.max(1) as f64;
        Metrics {
            rmse: (self.sq / n).sqrt(),
            mae: self.abs / n,
            mape: (self.n_mape > 0).then(|| 100.0 * self.ape / self.n_mape as f64),
            mape_excluded: self.n - self.n_mape,
            count: self.n,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    /// Percent; `None` when every target fell below the floor.
    pub mape: Option<f64>,
    pub mape_excluded: usize,
    pub count: usize,
}

pub fn metrics_with_floor(y: &[f64], y_hat: &[f64], floor: f64) -> Result<Metrics> {
    if y.len() != y_hat.len() {
        return Err(Error::Dimension {
            op: "evaluate",
            lhs: vec![y.len()],
            rhs: vec![y_hat.len()],
        });
    }
    let mut s = Sums::default();
    for (&a, &b) in y.iter().zip(y_hat) {
        s.push(a, b, floor);
    }
    Ok(s.finish())
}

pub fn metrics(y: &[f64], y_hat: &[f64]) -> Result<Metrics> {
    metrics_with_floor(y, y_hat, MAPE_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: Metrics,
    pub per_horizon: Vec<Metrics>,
    pub per_node: Vec<Metrics>,
}

/// Metrics over `[W, N, p]` (or `[W, N, p, 1]`) arrays with horizon and
/// node breakdowns.
pub fn evaluate(y: &Array, y_hat: &Array) -> Result<MetricsReport> {
    if y.shape() != y_hat.shape() || y.ndim() < 3 {
        return Err(Error::Dimension {
            op: "evaluate",
            lhs: y.shape().to_vec(),
            rhs: y_hat.shape().to_vec(),
        });
    }
    let (n, p) = (y.shape()[1], y.shape()[2]);
    let mut all = Sums::default();
    let mut by_h = vec![Sums::default(); p];
    let mut by_n = vec![Sums::default(); n];
    let per_window = n * p;
    for (i, (&a, &b)) in y.data().iter().zip(y_hat.data()).enumerate() {
        let node = (i % per_window) / p;
        let h = i % p;
        all.push(a, b, MAPE_FLOOR);
        by_h[h].push(a, b, MAPE_FLOOR);
        by_n[node].push(a, b, MAPE_FLOOR);
    }
    Ok(MetricsReport {
        overall: all.finish(),
        per_horizon: by_h.iter().map(Sums::finish).collect(),
        per_node: by_n.iter().map(Sums::finish).collect(),
    })
}
