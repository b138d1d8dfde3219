//! Wengert-list reverse-mode differentiation.
//!
//! Every op evaluates eagerly and appends a node holding its value, so node
//! indices are a topological order by construction. `backward` walks the
//! list once in reverse, summing adjoints over every use of a node.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;

use super::params::{Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::tensor::{numel, strides, Array};

/// Lower clamp applied to the variance inside [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Tanh,
    Gelu,
    Softplus,
    Sigmoid,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "gelu" => Ok(Activation::Gelu),
            "softplus" => Ok(Activation::Softplus),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Gelu => "gelu",
            Activation::Softplus => "softplus",
            Activation::Sigmoid => "sigmoid",
        };
        f.write_str(s)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)),
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative at `x`, given `y = apply(x)`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
                cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
            }
            Activation::Softplus => sigmoid(x),
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

/// Deliberate adjoint corruption, used as a negative control for gradient
/// checking.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FaultInjection {
    #[default]
    None,
    /// Negate the adjoint propagated through every activation.
    FlipActivationSign,
}

#[derive(Clone, Debug)]
struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    /// (lhs offset, rhs offset) per output batch slice.
    offsets: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Abs(Var),
    Act(Var, Activation),
    Pow(Var, Var),
    ClampMin(Var, f64),
    MatMul(Var, Var, MatMulPlan),
    Sum {
        x: Var,
        reduced: Vec<bool>,
        scale: f64,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    Broadcast {
        x: Var,
        axis: usize,
        count: usize,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
}

struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation. One tape per forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    bound_params: HashMap<usize, Var>,
    fault: FaultInjection,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Walk every multi-index of `shape` in row-major order, tracking one flat
/// offset per supplied per-axis stride table.
fn odometer<const K: usize>(
    shape: &[usize],
    strides: [&[usize]; K],
    mut f: impl FnMut([usize; K]),
) {
    let total = numel(shape);
    if total == 0 {
        return;
    }
    if shape.is_empty() {
        f([0; K]);
        return;
    }
    let rank = shape.len();
    let inner = shape[rank - 1];
    let step: [usize; K] = std::array::from_fn(|k| strides[k][rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let mut offs = [0usize; K];
    for _ in 0..total / inner {
        let mut o = offs;
        for _ in 0..inner {
            f(o);
            for k in 0..K {
                o[k] += step[k];
            }
        }
        let mut axis = rank - 1;
        while axis > 0 {
            axis -= 1;
            idx[axis] += 1;
            for (o, s) in offs.iter_mut().zip(strides.iter()) {
                *o += s[axis];
            }
            if idx[axis] < shape[axis] {
                break;
            }
            for (o, s) in offs.iter_mut().zip(strides.iter()) {
                *o -= s[axis] * shape[axis];
            }
            idx[axis] = 0;
        }
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bound_params: HashMap::new(),
            fault: FaultInjection::None,
        }
    }

    pub fn with_fault(fault: FaultInjection) -> Self {
        Tape {
            fault,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Array, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Array) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array::scalar(value))
    }

    /// Trainable leaf bound to `store[name]`. Binding the same name twice
    /// returns the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        if let Some(&v) = self.bound_params.get(&idx) {
            return Ok(v);
        }
        let (_, value) = store.by_index(idx).expect("index from index_of");
        self.nodes.push(Node {
            value: value.clone(),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound_params.insert(idx, v);
        Ok(v)
    }

    pub fn check_finite(&self, v: Var, context: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric {
                context: context.to_string(),
            })
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Entrywise (Hadamard) product of equal-shaped arrays.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// `x + bias` with `bias` broadcast over every axis but the last.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(bias);
        if bs.len() != 1 || xs.last() != Some(&bs[0]) {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: xs.to_vec(),
                rhs: bs.to_vec(),
            });
        }
        let c = bs[0];
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        if c > 0 {
            for row in value.data_mut().chunks_mut(c) {
                for (v, bb) in row.iter_mut().zip(&b) {
                    *v += bb;
                }
            }
        }
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `x * s` for a single-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item().map_err(|_| Error::Dimension {
            op: "mul_scalar",
            lhs: self.shape(x).to_vec(),
            rhs: self.shape(s).to_vec(),
        })?;
        let value = self.value(x).map(|v| v * sv);
        Ok(self.push(value, Op::MulScalar(x, s), &[x, s]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), &[x])
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddConst(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::abs);
        self.push(value, Op::Abs(x), &[x])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let value = self.value(x).map(|v| kind.apply(v));
        self.push(value, Op::Act(x, kind), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Softplus)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    /// Entrywise `base ^ exponent` with a differentiable scalar exponent.
    pub fn pow(&mut self, base: Var, exponent: Var) -> Result<Var> {
        let e = self.value(exponent).item().map_err(|_| {
            Error::shape(
                "pow",
                format!("exponent must be a scalar, got {:?}", self.shape(exponent)),
            )
        })?;
        if let Some(bad) = self
            .value(base)
            .data()
            .iter()
            .find(|&&b| b < 0.0 || b.is_nan())
        {
            return Err(Error::domain(
                "pow",
                format!("base entry {bad} is negative; fractional power undefined"),
            ));
        }
        let value = self.value(base).map(|b| b.powf(e));
        Ok(self.push(value, Op::Pow(base, exponent), &[base, exponent]))
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        let value = self.value(x).map(|v| v.max(lo));
        self.push(value, Op::ClampMin(x, lo), &[x])
    }

    /// Batched matrix product `[.., m, k] · [.., k, n] -> [.., m, n]`.
    /// Leading batch extents broadcast numpy-style (right-aligned, extent 1
    /// or missing stretches).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || Error::Dimension {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(mismatch());
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let rank = ba.len().max(bb.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(ba), pad(bb));
        let mut batch = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            batch.push(match (x, y) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return Err(mismatch()),
            });
        }
        let slice_strides = |p: &[usize], mat: usize| -> Vec<usize> {
            let st = strides(p);
            p.iter()
                .zip(st)
                .map(|(&e, s)| if e == 1 { 0 } else { s * mat })
                .collect()
        };
        let sta = slice_strides(&pa, m * k);
        let stb = slice_strides(&pb, k * n);
        let mut offsets = Vec::with_capacity(numel(&batch));
        if batch.is_empty() {
            offsets.push((0, 0));
        } else {
            odometer(&batch, [&sta, &stb], |[oa, ob]| offsets.push((oa, ob)));
        }
        let mut out_shape = batch;
        out_shape.extend_from_slice(&[m, n]);
        let mut out = Array::zeros(out_shape);
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            let od = out.data_mut();
            for (i, &(oa, ob)) in offsets.iter().enumerate() {
                gemm(
                    m,
                    k,
                    n,
                    &ad[oa..],
                    (k as isize, 1),
                    &bd[ob..],
                    (n as isize, 1),
                    &mut od[i * m * n..],
                    (n as isize, 1),
                    false,
                );
            }
        }
        let plan = MatMulPlan { m, k, n, offsets };
        Ok(self.push(out, Op::MatMul(a, b, plan), &[a, b]))
    }

    fn reduce(&mut self, x: Var, axes: &[usize], mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut reduced = vec![false; shape.len()];
        for &ax in axes {
            if ax >= shape.len() || reduced[ax] {
                return Err(Error::shape(
                    "reduce",
                    format!("axes {:?} invalid for shape {:?}", axes, shape),
                ));
            }
            reduced[ax] = true;
        }
        let count: usize = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| r)
            .map(|(&e, _)| e)
            .product();
        if mean && count == 0 {
            return Err(Error::domain("reduce_mean", "empty reduction extent"));
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&e, _)| e)
            .collect();
        let out_map = reduce_strides(&shape, &reduced);
        let in_strides = strides(&shape);
        let mut out = Array::zeros(out_shape);
        {
            let xd = self.value(x).data();
            let od = out.data_mut();
            odometer(&shape, [&in_strides, &out_map], |[i, o]| od[o] += xd[i]);
        }
        let scale = if mean { 1.0 / count as f64 } else { 1.0 };
        if mean {
            for v in out.data_mut() {
                *v *= scale;
            }
        }
        Ok(self.push(out, Op::Sum { x, reduced, scale }, &[x]))
    }

    /// Sum over `axes`, removing them.
    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, axes, false)
    }

    /// Arithmetic mean over `axes`, removing them.
    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, axes, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, &axes, false).expect("all axes are valid")
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, &axes, true)
    }

    /// Normalise over the last axis, then apply `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap_or(&0);
        if c == 0 {
            return Err(Error::domain("layer_norm", "channel extent is 0"));
        }
        for p in [gain, bias] {
            if self.shape(p) != [c] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            let (mu, inv) = row_moments(row);
            for ((v, gg), bb) in row.iter_mut().zip(&g).zip(&b) {
                *v = (*v - mu) * inv * gg + bb;
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gain, bias }, &[x, gain, bias]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for {:?}", base),
            ));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, inner) = outer_inner(&base, axis);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Array::new(out_shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Range(format!(
                "slice {start}..{} of axis {axis} in {:?}",
                start + len,
                shape
            )));
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(numel(&out_shape));
        let xd = self.value(x).data();
        for o in 0..outer {
            let base = o * shape[axis] * inner + start * inner;
            data.extend_from_slice(&xd[base..base + len * inner]);
        }
        let value = Array::new(out_shape, data)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::shape(
                "permute",
                format!("{:?} is not a permutation for {:?}", axes, shape),
            ));
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let gathered: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut data = Vec::with_capacity(numel(&shape));
        let xd = self.value(x).data();
        odometer(&out_shape, [&gathered], |[i]| data.push(xd[i]));
        let value = Array::new(out_shape, data)?;
        Ok(self.push(
            value,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        ))
    }

    /// Swap the trailing two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", format!("rank {r} < 2")));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Insert a new axis at `axis` holding `count` copies of `x`.
    pub fn broadcast_axis(&mut self, x: Var, axis: usize, count: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis > shape.len() {
            return Err(Error::shape(
                "broadcast_axis",
                format!("axis {axis} > rank {}", shape.len()),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let mut out_shape = shape.clone();
        out_shape.insert(axis, count);
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            let chunk = &xd[o * inner..(o + 1) * inner];
            for _ in 0..count {
                data.extend_from_slice(chunk);
            }
        }
        let value = Array::new(out_shape, data)?;
        Ok(self.push(value, Op::Broadcast { x, axis, count }, &[x]))
    }

    /// Row lookup: `table` is `[rows, width]`, the result is
    /// `[prefix.., width]` with `indices` laid out row-major over `prefix`.
    pub fn gather(&mut self, table: Var, indices: &[usize], prefix: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::shape(
                "gather",
                format!("table must be 2-D, got {:?}", ts),
            ));
        }
        if numel(prefix) != indices.len() {
            return Err(Error::shape(
                "gather",
                format!(
                    "prefix {:?} holds {} indices, got {}",
                    prefix,
                    numel(prefix),
                    indices.len()
                ),
            ));
        }
        let (rows, width) = (ts[0], ts[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Range(format!(
                "embedding index {bad} outside table of {rows} rows"
            )));
        }
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(&td[i * width..(i + 1) * width]);
        }
        let mut out_shape = prefix.to_vec();
        out_shape.push(width);
        let value = Array::new(out_shape, data)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Returns one gradient per entry of
    /// `store`; parameters the graph never touched get exact zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        let adj = self.adjoints(loss)?;
        let mut entries = IndexMap::with_capacity(store.len());
        for (idx, (name, value)) in store.iter().enumerate() {
            let g = self
                .bound_params
                .get(&idx)
                .and_then(|v| adj[v.0].clone())
                .unwrap_or_else(|| Array::zeros(value.shape().to_vec()));
            entries.insert(name.to_string(), g);
        }
        Ok(Gradients { entries })
    }

    /// Adjoint of every node with respect to `loss` (None where no path exists).
    pub fn adjoints(&self, loss: Var) -> Result<Vec<Option<Array>>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut adj: Vec<Option<Array>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Array::ones(lv.shape().to_vec()));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut adj);
            }
            adj[i] = Some(g);
        }
        Ok(adj)
    }

    fn propagate(&self, i: usize, g: &Array, adj: &mut [Option<Array>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, contrib: Array| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(existing) => existing.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                if wants(*b) {
                    acc(*b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y).expect("shapes"));
                }
                if wants(*b) {
                    acc(*b, g.zip_map(val(*a), |x, y| x * y).expect("shapes"));
                }
            }
            Op::AddBias(x, bias) => {
                acc(*x, g.clone());
                if wants(*bias) {
                    let c = val(*bias).len();
                    let mut gb = Array::zeros([c]);
                    if c > 0 {
                        for row in g.data().chunks(c) {
                            for (t, r) in gb.data_mut().iter_mut().zip(row) {
                                *t += r;
                            }
                        }
                    }
                    acc(*bias, gb);
                }
            }
            Op::MulScalar(x, s) => {
                let sv = val(*s).data()[0];
                if wants(*x) {
                    acc(*x, g.map(|v| v * sv));
                }
                if wants(*s) {
                    let dot: f64 = g
                        .data()
                        .iter()
                        .zip(val(*x).data())
                        .map(|(a, b)| a * b)
                        .sum();
                    acc(
                        *s,
                        Array::new(val(*s).shape().to_vec(), vec![dot]).expect("scalar"),
                    );
                }
            }
            Op::Scale(x, c) => acc(*x, g.map(|v| v * c)),
            Op::AddConst(x) => acc(*x, g.clone()),
            Op::Abs(x) => acc(
                *x,
                g.zip_map(val(*x), |gg, xx| {
                    if xx > 0.0 {
                        gg
                    } else if xx < 0.0 {
                        -gg
                    } else {
                        0.0
                    }
                })
                .expect("shapes"),
            ),
            Op::Act(x, kind) => {
                let sign = if self.fault == FaultInjection::FlipActivationSign {
                    -1.0
                } else {
                    1.0
                };
                let xd = val(*x).data();
                let yd = node.value.data();
                let data = g
                    .data()
                    .iter()
                    .zip(xd)
                    .zip(yd)
                    .map(|((gg, &xx), &yy)| sign * gg * kind.derivative(xx, yy))
                    .collect();
                acc(*x, Array::new(g.shape().to_vec(), data).expect("shapes"));
            }
            Op::Pow(base, exponent) => {
                let e = val(*exponent).data()[0];
                let bd = val(*base).data();
                let yd = node.value.data();
                if wants(*base) {
                    let data = g
                        .data()
                        .iter()
                        .zip(bd)
                        .map(|(gg, &b)| {
                            if e == 0.0 {
                                0.0
                            } else {
                                gg * e * b.powf(e - 1.0)
                            }
                        })
                        .collect();
                    acc(*base, Array::new(g.shape().to_vec(), data).expect("shapes"));
                }
                if wants(*exponent) {
                    let de: f64 = g
                        .data()
                        .iter()
                        .zip(bd)
                        .zip(yd)
                        .map(|((gg, &b), &y)| if b > 0.0 { gg * y * b.ln() } else { 0.0 })
                        .sum();
                    acc(
                        *exponent,
                        Array::new(val(*exponent).shape().to_vec(), vec![de]).expect("scalar"),
                    );
                }
            }
            Op::ClampMin(x, lo) => acc(
                *x,
                g.zip_map(val(*x), |gg, xx| if xx >= *lo { gg } else { 0.0 })
                    .expect("shapes"),
            ),
            Op::MatMul(a, b, plan) => {
                let MatMulPlan { m, k, n, offsets } = plan;
                let (m, k, n) = (*m, *k, *n);
                let gd = g.data();
                if wants(*a) {
                    let bd = val(*b).data();
                    let mut ga = Array::zeros(val(*a).shape().to_vec());
                    let gad = ga.data_mut();
                    for (i, &(oa, ob)) in offsets.iter().enumerate() {
                        // dA = dC · Bᵀ
                        gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..],
                            (n as isize, 1),
                            &bd[ob..],
                            (1, n as isize),
                            &mut gad[oa..],
                            (k as isize, 1),
                            true,
                        );
                    }
                    acc(*a, ga);
                }
                if wants(*b) {
                    let ad = val(*a).data();
                    let mut gb = Array::zeros(val(*b).shape().to_vec());
                    let gbd = gb.data_mut();
                    for (i, &(oa, ob)) in offsets.iter().enumerate() {
                        // dB = Aᵀ · dC
                        gemm(
                            k,
                            m,
                            n,
                            &ad[oa..],
                            (1, k as isize),
                            &gd[i * m * n..],
                            (n as isize, 1),
                            &mut gbd[ob..],
                            (n as isize, 1),
                            true,
                        );
                    }
                    acc(*b, gb);
                }
            }
            Op::Sum { x, reduced, scale } => {
                let shape = val(*x).shape();
                let out_map = reduce_strides(shape, reduced);
                let in_strides = strides(shape);
                let mut gx = Array::zeros(shape.to_vec());
                {
                    let gxd = gx.data_mut();
                    let gd = g.data();
                    odometer(shape, [&in_strides, &out_map], |[i, o]| {
                        gxd[i] = gd[o] * scale
                    });
                }
                acc(*x, gx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let xv = val(*x);
                let c = *xv.shape().last().expect("rank >= 1");
                let gain_d = val(*gain).data();
                let mut gx = Array::zeros(xv.shape().to_vec());
                let mut gg = vec![0.0; c];
                let mut gbias = vec![0.0; c];
                let mut xhat = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for ((xrow, grow), gxrow) in xv
                    .data()
                    .chunks(c)
                    .zip(g.data().chunks(c))
                    .zip(gx.data_mut().chunks_mut(c))
                {
                    let (mu, inv) = row_moments(xrow);
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..c {
                        xhat[j] = (xrow[j] - mu) * inv;
                        dxhat[j] = grow[j] * gain_d[j];
                        gg[j] += grow[j] * xhat[j];
                        gbias[j] += grow[j];
                        sum_d += dxhat[j];
                        sum_dx += dxhat[j] * xhat[j];
                    }
                    let cf = c as f64;
                    for j in 0..c {
                        gxrow[j] = inv / cf * (cf * dxhat[j] - sum_d - xhat[j] * sum_dx);
                    }
                }
                acc(*x, gx);
                acc(*gain, Array::new([c], gg).expect("shape"));
                acc(*bias, Array::new([c], gbias).expect("shape"));
            }
            Op::Concat { inputs, axis } => {
                let out_shape = g.shape();
                let (outer, inner) = outer_inner(out_shape, *axis);
                let total = out_shape[*axis];
                let mut start = 0;
                for &v in inputs {
                    let ext = val(v).shape()[*axis];
                    if wants(v) {
                        let mut part = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let base = o * total * inner + start * inner;
                            part.extend_from_slice(&g.data()[base..base + ext * inner]);
                        }
                        acc(v, Array::new(val(v).shape().to_vec(), part).expect("shape"));
                    }
                    start += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = val(*x).shape();
                let (outer, inner) = outer_inner(shape, *axis);
                let len = g.shape()[*axis];
                let mut gx = Array::zeros(shape.to_vec());
                {
                    let gxd = gx.data_mut();
                    for o in 0..outer {
                        let dst = o * shape[*axis] * inner + start * inner;
                        let src = o * len * inner;
                        gxd[dst..dst + len * inner]
                            .copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                }
                acc(*x, gx);
            }
            Op::Permute { x, axes } => {
                let shape = val(*x).shape();
                let in_strides = strides(shape);
                let gathered: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
                let mut gx = Array::zeros(shape.to_vec());
                {
                    let gxd = gx.data_mut();
                    let mut src = g.data().iter();
                    odometer(g.shape(), [&gathered], |[i]| {
                        gxd[i] = *src.next().expect("len")
                    });
                }
                acc(*x, gx);
            }
            Op::Reshape(x) => acc(*x, g.reshape(val(*x).shape().to_vec()).expect("same numel")),
            Op::Broadcast { x, axis, count } => {
                let shape = val(*x).shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis..].iter().product();
                let mut gx = Array::zeros(shape.to_vec());
                {
                    let gxd = gx.data_mut();
                    let gd = g.data();
                    for o in 0..outer {
                        for c in 0..*count {
                            let src = (o * count + c) * inner;
                            for j in 0..inner {
                                gxd[o * inner + j] += gd[src + j];
                            }
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Gather { table, indices } => {
                let ts = val(*table).shape();
                let width = ts[1];
                let mut gt = Array::zeros(ts.to_vec());
                {
                    let gtd = gt.data_mut();
                    for (r, &i) in indices.iter().enumerate() {
                        let src = &g.data()[r * width..(r + 1) * width];
                        for (d, s) in gtd[i * width..(i + 1) * width].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                acc(*table, gt);
            }
        }
    }
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let c = row.len() as f64;
    let mu = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c;
    (mu, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

/// Per-axis stride into the reduced output (0 on reduced axes).
fn reduce_strides(shape: &[usize], reduced: &[bool]) -> Vec<usize> {
    let kept: Vec<usize> = shape
        .iter()
        .zip(reduced)
        .filter(|(_, &r)| !r)
        .map(|(&e, _)| e)
        .collect();
    let ks = strides(&kept);
    let mut it = ks.into_iter();
    reduced
        .iter()
        .map(|&r| if r { 0 } else { it.next().expect("kept axis") })
        .collect()
}
