//! Dense-array reverse-mode differentiation.

mod gradcheck;
mod params;
mod tape;

pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport, ParamCheck};
pub use params::{Gradients, ParamStore};
pub use tape::{sigmoid, softplus, Activation, FaultInjection, Tape, Var, LAYER_NORM_EPS};

#[cfg(test)]
mod tests;
