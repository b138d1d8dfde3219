//! Small layer helpers shared by the model modules.

use rand::Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::Result;
use crate::tensor::Array;

/// `x · w (+ b)` over the last axis of `x`, any leading shape.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let k = *shape.last().unwrap_or(&1);
    let rows: usize = shape[..shape.len().saturating_sub(1)].iter().product();
    let flat = tape.reshape(x, &[rows, k])?;
    let mut y = tape.matmul(flat, w)?;
    if let Some(b) = b {
        y = tape.add_bias(y, b)?;
    }
    let mut out_shape = shape;
    let n = tape.shape(y)[1];
    *out_shape.last_mut().expect("rank >= 1") = n;
    tape.reshape(y, &out_shape)
}

/// Bind `{prefix}.w` and `{prefix}.b` and apply them.
pub fn dense(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    linear(tape, x, w, Some(b))
}

/// Parameter initialiser: Xavier-uniform weights, zero biases.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    pub fn xavier(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<()> {
        let a = Array::xavier_uniform(shape.to_vec(), self.rng);
        self.store.insert(name, a).map(|_| ())
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<()> {
        self.store
            .insert(name, Array::full(shape.to_vec(), value))
            .map(|_| ())
    }

    /// `{prefix}.w` of shape `[fan_in, fan_out]` and a zero `{prefix}.b`.
    pub fn dense(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.xavier(format!("{prefix}.w"), &[fan_in, fan_out])?;
        self.constant(format!("{prefix}.b"), &[fan_out], 0.0)
    }
}
