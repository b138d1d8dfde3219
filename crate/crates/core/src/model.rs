//! The full network: embedding, Hadamard mapper, stacked blocks with
//! per-layer gravity gates, skip aggregation and the decoder head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adagravity::{self, build_distance_kernel, DistanceKernel};
use crate::autodiff::{ParamStore, Tape, Var};
use crate::config::ModelConfig;
use crate::embedding::{self, TimestampFeatures};
use crate::error::{Error, Result};
use crate::gc2former::{self, BlockKind};
use crate::hadamard;
use crate::nn::{self, Init};
use crate::scaler::ZScoreScaler;
use crate::tensor::Array;

pub const HADAMARD: &str = "hadamard.w";
pub const DEC_HIDDEN: &str = "decoder.hidden";
pub const DEC_OUT: &str = "decoder.out";
pub const HORIZON: &str = "decoder.horizon";

pub fn block_prefix(layer: usize) -> String {
    format!("block{layer}")
}

pub fn gravity_prefix(layer: usize) -> String {
    format!("block{layer}.gravity")
}

pub fn skip_prefix(layer: usize) -> String {
    format!("skip{layer}")
}

/// One mini-batch. Inputs are z-scored, `y` is on the real scale.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, N, q, 1]`.
    pub x_h: Array,
    pub x_in: Array,
    pub x_out: Array,
    pub timestamps: Vec<TimestampFeatures>,
    /// `[B, N, p, 1]`.
    pub y: Array,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.x_h.shape().first().copied().unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerTrace {
    pub output: Var,
    /// `[B,q,N,N]` spatial scores before gating.
    pub spatial_scores: Option<Var>,
    /// `[B,N,N]`.
    pub gravity: Option<Var>,
    /// `relu(A_S ⊙ A_ag)`.
    pub gated: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `[B, N, p, 1]` on the real scale.
    pub prediction: Var,
    /// `[B, N, q, C_d]` decoder hidden layer before its activation, i.e. the
    /// hidden projection of the skip sum.
    pub hidden: Var,
    pub layers: Vec<LayerTrace>,
}

#[derive(Clone, Debug)]
pub struct Gravityformer {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub kernel: DistanceKernel,
}

pub fn init_params(cfg: &ModelConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut init = Init {
        store: &mut store,
        rng: &mut rng,
    };
    embedding::init_params(&mut init, cfg)?;
    if !cfg.ablation.no_adagravity {
        adagravity::init_shared(&mut init, cfg)?;
    }
    if !cfg.ablation.no_hadamard_mapper {
        init.xavier(HADAMARD, &[cfg.c_in, cfg.c_in])?;
    }
    for (l, kind) in gc2former::layer_kinds(cfg).into_iter().enumerate() {
        gc2former::init_block(&mut init, &block_prefix(l), kind, cfg)?;
        if kind.has_spatial() && !cfg.ablation.no_adagravity {
            adagravity::init_layer(&mut init, &gravity_prefix(l), cfg)?;
        }
        init.dense(&skip_prefix(l), cfg.c_in, cfg.c_skip)?;
    }
    init.dense(DEC_HIDDEN, cfg.c_skip, cfg.c_d)?;
    init.dense(DEC_OUT, cfg.c_d, 1)?;
    init.dense(HORIZON, cfg.input_len, cfg.horizon)?;
    for (_, a) in store.iter_mut() {
        a.round_to_f32();
    }
    Ok(store)
}

/// `mean |y − ŷ|`.
pub fn l1_loss(tape: &mut Tape, y: Var, y_hat: Var) -> Result<Var> {
    let d = tape.sub(y_hat, y)?;
    let a = tape.abs(d);
    tape.mean_all(a)
}

impl Gravityformer {
    /// Fresh model seeded by `config.seed`.
    pub fn new(config: ModelConfig, distances: &Array) -> Result<Self> {
        let params = init_params(&config)?;
        Self::from_parts(config, params, distances)
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore, distances: &Array) -> Result<Self> {
        config.validate()?;
        if distances.shape() != [config.nodes, config.nodes] {
            return Err(Error::Config(format!(
                "model has N = {} nodes but the distance matrix is {:?}",
                config.nodes,
                distances.shape()
            )));
        }
        let kernel = build_distance_kernel(distances, config.sigma_d)?;
        Ok(Gravityformer {
            config,
            params,
            kernel,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let c = &self.config;
        let b = batch.size();
        let want_in = [b, c.nodes, c.input_len, c.in_channels];
        for (name, a) in [
            ("x_h", &batch.x_h),
            ("x_in", &batch.x_in),
            ("x_out", &batch.x_out),
        ] {
            if a.shape() != want_in {
                return Err(Error::Config(format!(
                    "batch {name} has shape {:?}, model expects {want_in:?}",
                    a.shape()
                )));
            }
        }
        let want_y = [b, c.nodes, c.horizon, 1];
        if batch.y.shape() != want_y {
            return Err(Error::Config(format!(
                "batch target has shape {:?}, model expects {want_y:?}",
                batch.y.shape()
            )));
        }
        if batch.timestamps.len() != b {
            return Err(Error::Config(format!(
                "{} timestamp windows for a batch of {b}",
                batch.timestamps.len()
            )));
        }
        Ok(())
    }

    /// Forward pass with parameters bound from `store` (normally
    /// `self.params`; gradient checks pass perturbed copies).
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        output: ZScoreScaler,
    ) -> Result<ForwardTrace> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let ab = cfg.ablation;
        let x_h = tape.constant(batch.x_h.clone());
        let z = embedding::embed(tape, store, x_h, &batch.timestamps)?;
        let mut cur = if ab.no_hadamard_mapper {
            z
        } else {
            let w = tape.param(store, HADAMARD)?;
            hadamard::hadamard_map(tape, z, w)?
        };

        let gravity_on = !ab.no_adagravity;
        let (e_in, e_out) = if gravity_on && !ab.no_flows {
            let xi = tape.constant(batch.x_in.clone());
            let xo = tape.constant(batch.x_out.clone());
            (
                Some(nn::dense(tape, store, adagravity::INFLOW, xi)?),
                Some(nn::dense(tape, store, adagravity::OUTFLOW, xo)?),
            )
        } else {
            (None, None)
        };
        let a_d = if gravity_on {
            Some(adagravity::distance_term(tape, store, &self.kernel, cfg)?)
        } else {
            None
        };

        // skip projections are folded into the decoder's hidden projection:
        // (Σ_l Z_l W_l + b_l) W_h = Σ_l Z_l (W_l W_h) + (b_l W_h)
        let w_h = tape.param(store, &format!("{DEC_HIDDEN}.w"))?;
        let mut hidden: Option<Var> = None;
        let mut layers = Vec::with_capacity(cfg.layers);
        for (l, kind) in gc2former::layer_kinds(cfg).into_iter().enumerate() {
            let gravity = match a_d {
                Some(a_d) if kind != BlockKind::TemporalOnly => {
                    let masses = adagravity::compute_masses(tape, e_in, e_out, z, cur)?;
                    Some(adagravity::layer_gravity(
                        tape,
                        store,
                        &gravity_prefix(l),
                        cfg,
                        a_d,
                        masses,
                    )?)
                }
                _ => None,
            };
            let out = gc2former::block_forward(tape, store, &block_prefix(l), cur, gravity, kind)?;
            cur = out.output;
            let prefix = skip_prefix(l);
            let w = tape.param(store, &format!("{prefix}.w"))?;
            let b = tape.param(store, &format!("{prefix}.b"))?;
            let w_fold = tape.matmul(w, w_h)?;
            let b_row = tape.reshape(b, &[1, cfg.c_skip])?;
            let b_fold = tape.matmul(b_row, w_h)?;
            let b_fold = tape.reshape(b_fold, &[cfg.c_d])?;
            let projected = nn::linear(tape, cur, w_fold, Some(b_fold))?;
            hidden = Some(match hidden {
                Some(h) => tape.add(h, projected)?,
                None => projected,
            });
            layers.push(LayerTrace {
                output: cur,
                spatial_scores: out.spatial_scores,
                gravity,
                gated: out.gated,
            });
        }
        let b_h = tape.param(store, &format!("{DEC_HIDDEN}.b"))?;
        let hidden = tape.add_bias(hidden.expect("layers >= 1"), b_h)?;

        let h = tape.relu(hidden);
        let y = nn::dense(tape, store, DEC_OUT, h)?;
        let (b, n, q) = (batch.size(), cfg.nodes, cfg.input_len);
        let y = tape.reshape(y, &[b, n, q])?;
        let y = nn::dense(tape, store, HORIZON, y)?;
        let y = tape.reshape(y, &[b, n, cfg.horizon, 1])?;
        let y = tape.scale(y, output.std);
        let prediction = tape.add_const(y, output.mean);
        tape.check_finite(prediction, "model prediction")?;
        Ok(ForwardTrace {
            prediction,
            hidden,
            layers,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        output: ZScoreScaler,
    ) -> Result<ForwardTrace> {
        self.forward_with(tape, &self.params, batch, output)
    }

    /// Forward pass plus L1 loss against `batch.y`.
    pub fn loss_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        output: ZScoreScaler,
    ) -> Result<(ForwardTrace, Var)> {
        let trace = self.forward_with(tape, store, batch, output)?;
        let y = tape.constant(batch.y.clone());
        let loss = l1_loss(tape, y, trace.prediction)?;
        Ok((trace, loss))
    }

    /// Predictions only, as a plain array.
    pub fn predict(&self, batch: &Batch, output: ZScoreScaler) -> Result<Array> {
        let mut tape = Tape::new();
        let trace = self.forward(&mut tape, batch, output)?;
        Ok(tape.value(trace.prediction).clone())
    }
}
