//! Adaptive gravity matrix.
//!
//! ```text
//! A_ag[b,i,j] = σ(G) · M_i[b,i]^σ(α1) · M_j[b,j]^σ(α2) · max(A_d[i,j]·A_s[i,j], ε)^σ(β)
//! ```
//!
//! `σ` is softplus, `A_d` a Gaussian distance kernel and `A_s` a learned
//! antisymmetric scaling. Masses pool inflow/outflow features together with
//! the embedding and the current layer input.

use rand::Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::config::{ModelConfig, SigmaD};
use crate::error::{Error, Result};
use crate::nn::Init;
use crate::tensor::Array;

/// Floor on the base of the distance power.
pub const EPS_POW: f64 = 1e-6;
/// Added to softplus-pooled masses.
pub const EPS_MASS: f64 = 1e-6;

pub const INFLOW: &str = "gravity.inflow";
pub const OUTFLOW: &str = "gravity.outflow";
pub const ADJ_U: &str = "gravity.adjacency.u";
pub const ADJ_V: &str = "gravity.adjacency.v";

/// Classic gravity flows `G · P_i^α1 · P_j^α2 / d^β` with a zero diagonal.
pub fn classic_gravity(
    p_i: &[f64],
    p_j: &[f64],
    d: &Array,
    g: f64,
    alpha1: f64,
    alpha2: f64,
    beta: f64,
) -> Result<Array> {
    let n = p_i.len();
    if p_j.len() != n || d.shape() != [n, n] {
        return Err(Error::Dimension {
            op: "classic_gravity",
            lhs: vec![n, p_j.len()],
            rhs: d.shape().to_vec(),
        });
    }
    if let Some(m) = p_i.iter().chain(p_j).find(|&&m| !(m > 0.0)) {
        return Err(Error::domain(
            "classic_gravity",
            format!("mass {m} is not positive"),
        ));
    }
    let mut t = Array::zeros([n, n]);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let dij = d.data()[i * n + j];
            if !(dij > 0.0) {
                return Err(Error::domain(
                    "classic_gravity",
                    format!("distance d[{i}][{j}] = {dij} is not positive"),
                ));
            }
            t.data_mut()[i * n + j] =
                g * p_i[i].powf(alpha1) * p_j[j].powf(alpha2) / dij.powf(beta);
        }
    }
    Ok(t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceKernel {
    pub distances: Array,
    /// Resolved bandwidth.
    pub sigma: f64,
    /// `exp(-d² / 2σ²)`.
    pub kernel: Array,
}

/// Population standard deviation of the off-diagonal entries.
pub fn off_diagonal_std(d: &Array) -> f64 {
    let n = d.shape()[0];
    let vals: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| d.data()[i * n + j])
        .collect();
    if vals.is_empty() {
        return 0.0;
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
}

pub fn build_distance_kernel(d: &Array, sigma_d: SigmaD) -> Result<DistanceKernel> {
    if d.ndim() != 2 || d.shape()[0] != d.shape()[1] {
        return Err(Error::shape(
            "distance_kernel",
            format!("need a square matrix, got {:?}", d.shape()),
        ));
    }
    let sigma = match sigma_d {
        SigmaD::Auto => off_diagonal_std(d),
        SigmaD::Fixed(s) => s,
    };
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::Config(format!(
            "distance kernel bandwidth must be > 0, got {sigma}"
        )));
    }
    let kernel = d.map(|x| (-x * x / (2.0 * sigma * sigma)).exp());
    Ok(DistanceKernel {
        distances: d.clone(),
        sigma,
        kernel,
    })
}

/// `relu(tanh(κ (E1 E2ᵀ − E2 E1ᵀ)))` with `E = tanh(κ S)`.
pub fn adaptive_scaling(tape: &mut Tape, s1: Var, s2: Var, kappa: f64) -> Result<Var> {
    let a = tape.scale(s1, kappa);
    let e1 = tape.tanh(a);
    let b = tape.scale(s2, kappa);
    let e2 = tape.tanh(b);
    let e2t = tape.transpose(e2)?;
    let e1t = tape.transpose(e1)?;
    let p = tape.matmul(e1, e2t)?;
    let q = tape.matmul(e2, e1t)?;
    let diff = tape.sub(p, q)?;
    let scaled = tape.scale(diff, kappa);
    let t = tape.tanh(scaled);
    Ok(tape.relu(t))
}

/// Mass vectors `[B, N]` from inflow/outflow features `[B,N,q,C_f]`, the
/// embedding `z` and the layer input `z_layer`. `e_in`/`e_out` are `None`
/// when flows are ablated.
pub fn compute_masses(
    tape: &mut Tape,
    e_in: Option<Var>,
    e_out: Option<Var>,
    z: Var,
    z_layer: Var,
) -> Result<(Var, Var)> {
    // mean over the channel concat, as a channel-weighted sum of part means
    let mut pool = |flow: Option<Var>| -> Result<Var> {
        let parts: Vec<Var> = flow.into_iter().chain([z, z_layer]).collect();
        let width: usize = parts.iter().map(|&v| tape.shape(v)[3]).sum();
        let mut m: Option<Var> = None;
        for v in parts {
            let share = tape.shape(v)[3] as f64 / width as f64;
            let part = tape.mean(v, &[2, 3])?;
            let part = tape.scale(part, share);
            m = Some(match m {
                Some(acc) => tape.add(acc, part)?,
                None => part,
            });
        }
        let m = tape.softplus(m.expect("z is always pooled"));
        Ok(tape.add_const(m, EPS_MASS))
    };
    let mi = pool(e_in)?;
    let mj = pool(e_out)?;
    Ok((mi, mj))
}

/// Raw (pre-softplus) gravity scalars bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GravityVars {
    pub g: Var,
    pub alpha1: Var,
    pub alpha2: Var,
    pub beta: Var,
}

impl GravityVars {
    pub fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(GravityVars {
            g: tape.param(store, &format!("{prefix}.g"))?,
            alpha1: tape.param(store, &format!("{prefix}.alpha1"))?,
            alpha2: tape.param(store, &format!("{prefix}.alpha2"))?,
            beta: tape.param(store, &format!("{prefix}.beta"))?,
        })
    }
}

/// `A_ag` of shape `[B, N, N]` from masses `[B, N]` and the combined
/// distance term `base = A_d ⊙ A_s` of shape `[N, N]`.
pub fn gravity_matrix(
    tape: &mut Tape,
    mi: Var,
    mj: Var,
    base: Var,
    params: GravityVars,
) -> Result<Var> {
    let ms = tape.shape(mi).to_vec();
    if ms.len() != 2 || tape.shape(mj) != ms.as_slice() || tape.shape(base) != [ms[1], ms[1]] {
        return Err(Error::Dimension {
            op: "gravity_matrix",
            lhs: ms,
            rhs: tape.shape(base).to_vec(),
        });
    }
    let (b, n) = (ms[0], ms[1]);
    let g = tape.softplus(params.g);
    let a1 = tape.softplus(params.alpha1);
    let a2 = tape.softplus(params.alpha2);
    let beta = tape.softplus(params.beta);
    let pi = tape.pow(mi, a1)?;
    let pi = tape.reshape(pi, &[b, n, 1])?;
    let pj = tape.pow(mj, a2)?;
    let pj = tape.reshape(pj, &[b, 1, n])?;
    let outer = tape.matmul(pi, pj)?;
    let clamped = tape.clamp_min(base, EPS_POW);
    let decay = tape.pow(clamped, beta)?;
    let decay = tape.broadcast_axis(decay, 0, b)?;
    let a = tape.mul(outer, decay)?;
    let a = tape.mul_scalar(a, g)?;
    tape.check_finite(a, "gravity_matrix")?;
    Ok(a)
}

/// Names of the per-layer gravity parameters under `prefix`.
pub fn layer_param_names(prefix: &str, cfg: &ModelConfig) -> Vec<String> {
    let mut names: Vec<String> = ["g", "alpha1", "alpha2", "beta"]
        .iter()
        .map(|s| format!("{prefix}.{s}"))
        .collect();
    if !cfg.ablation.no_adaptive_scaling {
        names.push(format!("{prefix}.s1"));
        names.push(format!("{prefix}.s2"));
    }
    names
}

/// Parameters shared by every layer: the flow projectors and, when the
/// distance kernel is replaced, the adaptive adjacency factors.
pub fn init_shared<R: Rng>(init: &mut Init<'_, R>, cfg: &ModelConfig) -> Result<()> {
    if !cfg.ablation.no_flows {
        init.dense(INFLOW, cfg.in_channels, cfg.c_f)?;
        init.dense(OUTFLOW, cfg.in_channels, cfg.c_f)?;
    }
    if cfg.ablation.adaptive_adjacency {
        init.xavier(ADJ_U, &[cfg.nodes, cfg.c_e])?;
        init.xavier(ADJ_V, &[cfg.nodes, cfg.c_e])?;
    }
    Ok(())
}

/// Raw gravity scalars start at zero, so every softplus-mapped exponent
/// and the strength begin at ln 2.
pub fn init_layer<R: Rng>(init: &mut Init<'_, R>, prefix: &str, cfg: &ModelConfig) -> Result<()> {
    for s in ["g", "alpha1", "alpha2", "beta"] {
        init.constant(format!("{prefix}.{s}"), &[], 0.0)?;
    }
    if !cfg.ablation.no_adaptive_scaling {
        init.xavier(format!("{prefix}.s1"), &[cfg.nodes, cfg.c_e])?;
        init.xavier(format!("{prefix}.s2"), &[cfg.nodes, cfg.c_e])?;
    }
    Ok(())
}

/// The distance term `A_d` on the tape: the fixed kernel, or
/// `sigmoid(U Vᵀ)` under the adaptive-adjacency ablation.
pub fn distance_term(
    tape: &mut Tape,
    store: &ParamStore,
    kernel: &DistanceKernel,
    cfg: &ModelConfig,
) -> Result<Var> {
    if cfg.ablation.adaptive_adjacency {
        let u = tape.param(store, ADJ_U)?;
        let v = tape.param(store, ADJ_V)?;
        let vt = tape.transpose(v)?;
        let uv = tape.matmul(u, vt)?;
        Ok(tape.sigmoid(uv))
    } else {
        Ok(tape.constant(kernel.kernel.clone()))
    }
}

/// Full per-layer gravity matrix: `A_d ⊙ A_s` (or `A_d` alone when the
/// scaling is ablated) fed into [`gravity_matrix`].
pub fn layer_gravity(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    cfg: &ModelConfig,
    a_d: Var,
    masses: (Var, Var),
) -> Result<Var> {
    let base = if cfg.ablation.no_adaptive_scaling {
        a_d
    } else {
        let s1 = tape.param(store, &format!("{prefix}.s1"))?;
        let s2 = tape.param(store, &format!("{prefix}.s2"))?;
        let a_s = adaptive_scaling(tape, s1, s2, cfg.kappa)?;
        tape.mul(a_d, a_s)?
    };
    let params = GravityVars::bind(tape, store, prefix)?;
    gravity_matrix(tape, masses.0, masses.1, base, params)
}
