//! Central finite-difference verification of tape gradients.

use super::params::ParamStore;
use super::tape::{FaultInjection, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error. Entries whose gradient is
    /// below this magnitude are compared on an absolute scale, which keeps
    /// finite-difference round-off (about `eps * |loss| / step`) from
    /// dominating near-zero gradients.
    pub abs_floor: f64,
    pub fault: FaultInjection,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-6,
            abs_floor: 1e-3,
            fault: FaultInjection::None,
        }
    }
}

impl GradCheckConfig {
    pub fn new(step: f64, tolerance: f64) -> Self {
        GradCheckConfig {
            step,
            tolerance,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_error))
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_loss<F>(build: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    tape.value(loss).item()
}

/// Compare the tape gradient of `build`'s scalar output against central
/// differences for every entry of every parameter in `store`.
pub fn grad_check<F>(
    store: &ParamStore,
    config: &GradCheckConfig,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::with_fault(config.fault);
    let loss = build(&mut tape, store)?;
    let grads = tape.backward(loss, store)?;
    drop(tape);

    let mut work = store.clone();
    let mut params = Vec::with_capacity(store.len());
    for idx in 0..store.len() {
        let (name, value) = store.by_index(idx).expect("in range");
        let name = name.to_string();
        let analytic = grads.by_index(idx).expect("aligned");
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for j in 0..value.len() {
            let orig = value.data()[j];
            work.by_index_mut(idx).expect("in range").1.data_mut()[j] = orig + config.step;
            let plus = eval_loss(&build, &work)?;
            work.by_index_mut(idx).expect("in range").1.data_mut()[j] = orig - config.step;
            let minus = eval_loss(&build, &work)?;
            work.by_index_mut(idx).expect("in range").1.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * config.step);
            let a = analytic.data()[j];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numeric {
                    context: format!("gradient check of `{name}`[{j}]"),
                });
            }
            let err = relative_error(a, numeric, config.abs_floor);
            if err > check.max_rel_error || j == 0 {
                check.max_rel_error = err;
                check.worst_index = j;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport {
        params,
        tolerance: config.tolerance,
    })
}
