//! Gravity-governed synthetic city.
//!
//! Each step, node `i` emits `Poisson(rate_scale · mass_i · profile_i(t))`
//! trips. Every trip picks a destination `j ≠ i` with probability
//! proportional to `mass_j / d_ij^beta_true`, stays a geometric number of
//! steps, then leaves. Arrivals are inflow, departures at the end of a stay
//! are outflow, and activity is the number of visitors present.

use chrono::{Datelike, Duration, NaiveDate};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use super::dataset::{DatasetMeta, NodeInfo, PanelDataset, Units, DATASET_FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::tensor::Array;

/// Side of the square the nodes are scattered over.
pub const CITY_SIDE_KM: f64 = 20.0;
const MIN_SEPARATION_KM: f64 = 0.05;

/// Time-of-day departure curve: base rate plus morning and evening peaks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepartureProfile {
    pub base: f64,
    pub morning: f64,
    pub evening: f64,
    /// Peak centres in hours.
    pub morning_hour: f64,
    pub evening_hour: f64,
}

impl DepartureProfile {
    pub fn rate(&self, hour: f64) -> f64 {
        let bump =
            |centre: f64, width: f64| (-(hour - centre).powi(2) / (2.0 * width * width)).exp();
        self.base
            + self.morning * bump(self.morning_hour, 1.2)
            + self.evening * bump(self.evening_hour, 1.5)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CityScenario {
    pub nodes: usize,
    pub days: usize,
    pub steps_per_day: usize,
    /// Node positions in km.
    pub coords: Vec<(f64, f64)>,
    pub masses: Vec<f64>,
    pub beta_true: f64,
    pub profiles: Vec<DepartureProfile>,
    /// Mean stay in steps (geometric, support 1, 2, ...).
    pub stay_mean: f64,
    /// Poisson intensity scale applied to `mass · profile`.
    pub rate_scale: f64,
    pub weekend_factor: f64,
    pub holiday_factor: f64,
    pub start_date: NaiveDate,
    pub holidays: Vec<NaiveDate>,
    /// Simulated days discarded before recording so occupancy starts warm.
    pub warmup_days: usize,
    pub seed: u64,
}

/// Optional replacements for scenario defaults.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioOverrides {
    pub beta_true: Option<f64>,
    pub stay_mean: Option<f64>,
    pub rate_scale: Option<f64>,
    pub steps_per_day: Option<usize>,
    pub start_date: Option<NaiveDate>,
    pub holidays: Option<Vec<NaiveDate>>,
    pub mass_sigma: Option<f64>,
}

pub const DEFAULT_NODES: usize = 24;
pub const DEFAULT_DAYS: usize = 28;
pub const DEFAULT_BETA: f64 = 2.0;
pub const DEFAULT_STEPS_PER_DAY: usize = 48;

fn default_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2021, 11, 19).expect("valid date")
}

fn default_holidays() -> Vec<NaiveDate> {
    [(2021, 11, 25), (2021, 12, 24), (2021, 12, 25), (2022, 1, 1)]
        .into_iter()
        .map(|(y, m, d)| NaiveDate::from_ymd_opt(y, m, d).expect("valid date"))
        .collect()
}

pub fn generate_scenario(
    seed: u64,
    nodes: usize,
    days: usize,
    overrides: &ScenarioOverrides,
) -> Result<CityScenario> {
    if nodes < 2 {
        return Err(Error::Config(format!(
            "scenario needs at least 2 nodes, got {nodes}"
        )));
    }
    if days < 1 {
        return Err(Error::Config("scenario needs at least 1 day".into()));
    }
    let beta_true = overrides.beta_true.unwrap_or(DEFAULT_BETA);
    if !(beta_true.is_finite() && beta_true > 0.0) {
        return Err(Error::Config(format!(
            "beta_true must be > 0, got {beta_true}"
        )));
    }
    let stay_mean = overrides.stay_mean.unwrap_or(6.0);
    if !(stay_mean.is_finite() && stay_mean >= 1.0) {
        return Err(Error::Config(format!(
            "stay_mean must be >= 1 step, got {stay_mean}"
        )));
    }
    let rate_scale = overrides.rate_scale.unwrap_or(6.0);
    if !(rate_scale.is_finite() && rate_scale > 0.0) {
        return Err(Error::Config(format!(
            "rate_scale must be > 0, got {rate_scale}"
        )));
    }
    let steps_per_day = overrides.steps_per_day.unwrap_or(DEFAULT_STEPS_PER_DAY);
    if steps_per_day == 0 {
        return Err(Error::Config("steps_per_day must be >= 1".into()));
    }
    let mass_sigma = overrides.mass_sigma.unwrap_or(0.6);
    if !(mass_sigma.is_finite() && mass_sigma >= 0.0) {
        return Err(Error::Config(format!(
            "mass_sigma must be >= 0, got {mass_sigma}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords: Vec<(f64, f64)> = Vec::with_capacity(nodes);
    while coords.len() < nodes {
        let p = (
            rng.gen::<f64>() * CITY_SIDE_KM,
            rng.gen::<f64>() * CITY_SIDE_KM,
        );
        if coords
            .iter()
            .all(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt() >= MIN_SEPARATION_KM)
        {
            coords.push(p);
        }
    }
    let lognormal = LogNormal::new(0.0, mass_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let masses: Vec<f64> = (0..nodes).map(|_| lognormal.sample(&mut rng)).collect();
    let profiles = (0..nodes)
        .map(|_| DepartureProfile {
            base: rng.gen_range(0.2..0.4),
            morning: rng.gen_range(0.5..1.5),
            evening: rng.gen_range(0.5..1.5),
            morning_hour: rng.gen_range(7.5..9.5),
            evening_hour: rng.gen_range(16.5..19.0),
        })
        .collect();

    Ok(CityScenario {
        nodes,
        days,
        steps_per_day,
        coords,
        masses,
        beta_true,
        profiles,
        stay_mean,
        rate_scale,
        weekend_factor: 0.6,
        holiday_factor: 0.5,
        start_date: overrides.start_date.unwrap_or_else(default_start),
        holidays: overrides.holidays.clone().unwrap_or_else(default_holidays),
        warmup_days: 2,
        seed,
    })
}

/// Euclidean distance matrix of `coords`.
pub fn distance_matrix(coords: &[(f64, f64)]) -> Array {
    let n = coords.len();
    let mut d = Array::zeros([n, n]);
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (coords[i], coords[j]);
            d.data_mut()[i * n + j] = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
        }
    }
    d
}

/// Destination probabilities for trips leaving `origin`:
/// `mass_j / d^beta`, normalised over `j ≠ origin`.
pub fn routing_probabilities(
    masses: &[f64],
    distances: &Array,
    beta: f64,
    origin: usize,
) -> Vec<f64> {
    let n = masses.len();
    let mut w: Vec<f64> = (0..n)
        .map(|j| {
            if j == origin {
                0.0
            } else {
                masses[j] / distances.data()[origin * n + j].powf(beta)
            }
        })
        .collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// What happened during one simulated step.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub departures: Vec<u64>,
    /// Row-major `[N, N]` trip counts, origin by destination.
    pub routed: Vec<u64>,
    pub inflow: Vec<u64>,
    pub outflow: Vec<u64>,
    pub occupancy: Vec<u64>,
}

/// Step-by-step simulator; [`simulate`] drives it over a whole scenario.
pub struct Simulator<'a> {
    scenario: &'a CityScenario,
    rng: ChaCha8Rng,
    cumulative: Vec<Vec<f64>>,
    stay: Geometric,
    /// `ends[t][j]`: visitors at `j` whose stay ends at step `t`.
    ends: Vec<Vec<u64>>,
    occupancy: Vec<u64>,
    step: usize,
    first_date: NaiveDate,
}

impl<'a> Simulator<'a> {
    pub fn new(scenario: &'a CityScenario) -> Self {
        let n = scenario.nodes;
        let distances = distance_matrix(&scenario.coords);
        let cumulative = (0..n)
            .map(|i| {
                let p = routing_probabilities(&scenario.masses, &distances, scenario.beta_true, i);
                p.iter()
                    .scan(0.0, |acc, &x| {
                        *acc += x;
                        Some(*acc)
                    })
                    .collect()
            })
            .collect();
        let total = scenario.total_steps();
        Simulator {
            scenario,
            rng: ChaCha8Rng::seed_from_u64(scenario.seed ^ 0x5EED_C17E),
            cumulative,
            stay: Geometric::new(1.0 / scenario.stay_mean).expect("stay_mean >= 1"),
            ends: vec![vec![0; n]; total],
            occupancy: vec![0; n],
            step: 0,
            first_date: scenario.start_date - Duration::days(scenario.warmup_days as i64),
        }
    }

    pub fn finished(&self) -> bool {
        self.step >= self.scenario.total_steps()
    }

    fn intensity(&self, node: usize, step: usize) -> f64 {
        let sc = self.scenario;
        let d = sc.steps_per_day;
        let date = self.first_date + Duration::days((step / d) as i64);
        let hour = (step % d) as f64 * 24.0 / d as f64;
        let mut factor = 1.0;
        if date.weekday().num_days_from_monday() >= 5 {
            factor *= sc.weekend_factor;
        }
        if sc.holidays.contains(&date) {
            factor *= sc.holiday_factor;
        }
        sc.rate_scale * sc.masses[node] * sc.profiles[node].rate(hour) * factor
    }

    pub fn step(&mut self) -> StepRecord {
        let n = self.scenario.nodes;
        let t = self.step;
        let mut rec = StepRecord {
            departures: vec![0; n],
            routed: vec![0; n * n],
            inflow: vec![0; n],
            outflow: vec![0; n],
            occupancy: vec![0; n],
        };
        for i in 0..n {
            let lambda = self.intensity(i, t);
            let trips = if lambda > 0.0 {
                Poisson::new(lambda)
                    .expect("positive rate")
                    .sample(&mut self.rng) as u64
            } else {
                0
            };
            rec.departures[i] = trips;
            for _ in 0..trips {
                let u: f64 = self.rng.gen();
                let cum = &self.cumulative[i];
                let j = cum.partition_point(|&c| c < u).min(n - 1);
                // rounding can leave u just above the last cumulative weight;
                // never route to self
                let j = if j == i {
                    (0..n).rev().find(|&k| k != i).expect("n >= 2")
                } else {
                    j
                };
                rec.routed[i * n + j] += 1;
                rec.inflow[j] += 1;
                let stay = 1 + self.stay.sample(&mut self.rng) as usize;
                if let Some(slot) = self.ends.get_mut(t + stay) {
                    slot[j] += 1;
                }
            }
        }
        for j in 0..n {
            self.occupancy[j] += rec.inflow[j];
            rec.outflow[j] = self.ends[t][j];
            self.occupancy[j] -= rec.outflow[j];
        }
        rec.occupancy.copy_from_slice(&self.occupancy);
        self.step += 1;
        rec
    }
}

impl CityScenario {
    pub fn recorded_steps(&self) -> usize {
        self.days * self.steps_per_day
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_days * self.steps_per_day
    }

    pub fn total_steps(&self) -> usize {
        self.recorded_steps() + self.warmup_steps()
    }

    pub fn distances(&self) -> Array {
        distance_matrix(&self.coords)
    }
}

/// Run the scenario and return the recorded panel. Distances and the mean
/// OD matrix are rounded to `f32` so the on-disk format round-trips exactly.
pub fn simulate(scenario: &CityScenario) -> PanelDataset {
    let n = scenario.nodes;
    let s = scenario.recorded_steps();
    let warm = scenario.warmup_steps();
    let mut activity = Array::zeros([s, n]);
    let mut inflow = Array::zeros([s, n]);
    let mut outflow = Array::zeros([s, n]);
    let mut od = vec![0u64; n * n];
    let mut sim = Simulator::new(scenario);
    while !sim.finished() {
        let t = sim.step;
        let rec = sim.step();
        if t < warm {
            continue;
        }
        let r = t - warm;
        for j in 0..n {
            activity.data_mut()[r * n + j] = rec.occupancy[j] as f64;
            inflow.data_mut()[r * n + j] = rec.inflow[j] as f64;
            outflow.data_mut()[r * n + j] = rec.outflow[j] as f64;
        }
        for (acc, x) in od.iter_mut().zip(&rec.routed) {
            *acc += x;
        }
    }
    let mut true_gravity =
        Array::new([n, n], od.iter().map(|&c| c as f64 / s as f64).collect()).expect("n*n entries");
    true_gravity.round_to_f32();
    let mut distances = scenario.distances();
    distances.round_to_f32();

    let last = scenario.start_date + Duration::days(scenario.days as i64);
    let meta = DatasetMeta {
        format_version: DATASET_FORMAT_VERSION,
        nodes: n,
        steps: s,
        steps_per_day: scenario.steps_per_day,
        start_weekday: scenario.start_date.weekday().num_days_from_monday(),
        start_date: scenario.start_date,
        holiday_dates: scenario
            .holidays
            .iter()
            .copied()
            .filter(|d| *d >= scenario.start_date && *d < last)
            .collect(),
        node_info: scenario
            .coords
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| NodeInfo {
                id: format!("node{i:03}"),
                x: x as f32 as f64,
                y: y as f32 as f64,
            })
            .collect(),
        units: Units::default(),
    };
    PanelDataset {
        meta,
        activity,
        inflow,
        outflow,
        distances,
        true_gravity: Some(true_gravity),
    }
}
