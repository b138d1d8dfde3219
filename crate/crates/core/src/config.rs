//! Model hyperparameters and ablation switches.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bandwidth of the Gaussian distance kernel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SigmaD {
    /// Standard deviation of the off-diagonal distances.
    Auto,
    Fixed(f64),
}

impl Serialize for SigmaD {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            SigmaD::Auto => s.serialize_str("auto"),
            SigmaD::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for SigmaD {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(SigmaD::Fixed(v)),
            Raw::Text(t) if t == "auto" => Ok(SigmaD::Auto),
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "sigma_d must be a number or \"auto\", got \"{t}\""
            ))),
        }
    }
}

impl fmt::Display for SigmaD {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SigmaD::Auto => f.write_str("auto"),
            SigmaD::Fixed(v) => write!(f, "{v}"),
        }
    }
}

/// One switch per ablation variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Drop the gravity gate entirely; spatial attention is ungated.
    pub no_adagravity: bool,
    /// Fix the adaptive distance scaling matrix to all ones.
    pub no_adaptive_scaling: bool,
    /// Leave inflow/outflow features out of the mass pooling.
    pub no_flows: bool,
    /// Replace the distance kernel by a trainable adaptive adjacency.
    pub adaptive_adjacency: bool,
    pub no_hadamard_mapper: bool,
    /// Remove the value-modulation branches (V ≡ 1).
    pub no_conv2former: bool,
    /// Temporal-only blocks followed by spatial-only blocks instead of
    /// parallel branches.
    pub sequential_st: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub nodes: usize,
    /// Input window length.
    pub input_len: usize,
    /// Forecast horizon.
    pub horizon: usize,
    pub steps_per_day: usize,
    pub in_channels: usize,
    pub c_in: usize,
    pub c_d: usize,
    pub c_skip: usize,
    pub c_t: usize,
    pub c_a: usize,
    pub c_f: usize,
    pub c_e: usize,
    pub kappa: f64,
    pub layers: usize,
    pub sigma_d: SigmaD,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            nodes: 24,
            input_len: 12,
            horizon: 4,
            steps_per_day: 48,
            in_channels: 1,
            c_in: 32,
            c_d: 8,
            c_skip: 256,
            c_t: 24,
            c_a: 80,
            c_f: 24,
            c_e: 40,
            kappa: 0.2,
            layers: 6,
            sigma_d: SigmaD::Auto,
            ablation: Ablation::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small configuration used for end-to-end gradient checks.
    pub fn toy() -> Self {
        ModelConfig {
            nodes: 4,
            input_len: 8,
            horizon: 2,
            steps_per_day: 8,
            in_channels: 1,
            c_in: 8,
            c_d: 4,
            c_skip: 16,
            c_t: 4,
            c_a: 6,
            c_f: 4,
            c_e: 4,
            kappa: 0.2,
            layers: 2,
            sigma_d: SigmaD::Auto,
            ablation: Ablation::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("nodes", self.nodes),
            ("input_len", self.input_len),
            ("horizon", self.horizon),
            ("steps_per_day", self.steps_per_day),
            ("c_in", self.c_in),
            ("c_d", self.c_d),
            ("c_skip", self.c_skip),
            ("c_t", self.c_t),
            ("c_a", self.c_a),
            ("c_f", self.c_f),
            ("c_e", self.c_e),
            ("layers", self.layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.in_channels != 1 {
            return Err(Error::Config(format!(
                "in_channels must be 1 (activity only), got {}",
                self.in_channels
            )));
        }
        if !self.c_in.is_power_of_two() {
            return Err(Error::Config(format!(
                "c_in must be a power of two for the Hadamard mapper, got {}",
                self.c_in
            )));
        }
        if !(self.kappa.is_finite() && self.kappa > 0.0) {
            return Err(Error::Config(format!(
                "kappa must be > 0, got {}",
                self.kappa
            )));
        }
        if let SigmaD::Fixed(s) = self.sigma_d {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Config(format!("sigma_d must be > 0, got {s}")));
            }
        }
        Ok(())
    }
}

/// On-disk config file: every key optional, ablation switches at top level.
/// Absent keys take the defaults; `nodes`/`input_len`/`horizon`/`steps_per_day`
/// may be filled from the dataset by the caller.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub nodes: Option<usize>,
    pub input_len: Option<usize>,
    pub horizon: Option<usize>,
    pub steps_per_day: Option<usize>,
    pub in_channels: Option<usize>,
    pub c_in: Option<usize>,
    pub c_d: Option<usize>,
    pub c_skip: Option<usize>,
    pub c_t: Option<usize>,
    pub c_a: Option<usize>,
    pub c_f: Option<usize>,
    pub c_e: Option<usize>,
    pub kappa: Option<f64>,
    pub layers: Option<usize>,
    pub sigma_d: Option<SigmaD>,
    pub seed: Option<u64>,
    pub no_adagravity: Option<bool>,
    pub no_adaptive_scaling: Option<bool>,
    pub no_flows: Option<bool>,
    pub adaptive_adjacency: Option<bool>,
    pub no_hadamard_mapper: Option<bool>,
    pub no_conv2former: Option<bool>,
    pub sequential_st: Option<bool>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    /// Overlay the keys present in this file onto `base`.
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        macro_rules! set {
            ($($field:ident),*) => { $( if let Some(v) = self.$field { c.$field = v; } )* };
        }
        set!(
            nodes,
            input_len,
            horizon,
            steps_per_day,
            in_channels,
            c_in,
            c_d,
            c_skip,
            c_t,
            c_a,
            c_f,
            c_e,
            kappa,
            layers,
            sigma_d,
            seed
        );
        macro_rules! flag {
            ($($field:ident),*) => { $( if let Some(v) = self.$field { c.ablation.$field = v; } )* };
        }
        flag!(
            no_adagravity,
            no_adaptive_scaling,
            no_flows,
            adaptive_adjacency,
            no_hadamard_mapper,
            no_conv2former,
            sequential_st
        );
        c
    }

    pub fn from_config(c: &ModelConfig) -> Self {
        let a = c.ablation;
        ConfigFile {
            nodes: Some(c.nodes),
            input_len: Some(c.input_len),
            horizon: Some(c.horizon),
            steps_per_day: Some(c.steps_per_day),
            in_channels: Some(c.in_channels),
            c_in: Some(c.c_in),
            c_d: Some(c.c_d),
            c_skip: Some(c.c_skip),
            c_t: Some(c.c_t),
            c_a: Some(c.c_a),
            c_f: Some(c.c_f),
            c_e: Some(c.c_e),
            kappa: Some(c.kappa),
            layers: Some(c.layers),
            sigma_d: Some(c.sigma_d),
            seed: Some(c.seed),
            no_adagravity: Some(a.no_adagravity),
            no_adaptive_scaling: Some(a.no_adaptive_scaling),
            no_flows: Some(a.no_flows),
            adaptive_adjacency: Some(a.adaptive_adjacency),
            no_hadamard_mapper: Some(a.no_hadamard_mapper),
            no_conv2former: Some(a.no_conv2former),
            sequential_st: Some(a.sequential_st),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}
