use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Z-score normalisation `(x - mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZScoreScaler {
    pub mean: f64,
    pub std: f64,
}

impl ZScoreScaler {
    pub const IDENTITY: ZScoreScaler = ZScoreScaler {
        mean: 0.0,
        std: 1.0,
    };

    /// Population mean and standard deviation. A constant sample gets
    /// `std = 1` so the transform stays invertible.
    pub fn fit(values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let mut n = 0usize;
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for x in values {
            if !x.is_finite() {
                return Err(Error::Numeric {
                    context: "scaler fit input".into(),
                });
            }
            n += 1;
            let delta = x - mean;
            mean += delta / n as f64;
            m2 += delta * (x - mean);
        }
        if n == 0 {
            return Err(Error::domain("scaler_fit", "no values to fit"));
        }
        let std = (m2 / n as f64).sqrt();
        Ok(ZScoreScaler {
            mean,
            std: if std > 0.0 { std } else { 1.0 },
        })
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// One scaler per input series.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scalers {
    pub activity: ZScoreScaler,
    pub inflow: ZScoreScaler,
    pub outflow: ZScoreScaler,
}

impl Default for Scalers {
    fn default() -> Self {
        Scalers {
            activity: ZScoreScaler::IDENTITY,
            inflow: ZScoreScaler::IDENTITY,
            outflow: ZScoreScaler::IDENTITY,
        }
    }
}
