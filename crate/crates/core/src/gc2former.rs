//! Gravity-informed spatiotemporal GC2former block.
//!
//! Temporal attention runs per node over the `q` window steps, spatial
//! attention per time step over the `N` nodes. Scores are scaled by
//! `1/√C_d` and passed through ReLU (no softmax). The spatial operator is
//! gated entrywise by the gravity matrix. Each branch is modulated by a
//! value projection, the two are concatenated and projected back to `C_in`,
//! then a residual + LayerNorm, a GLU feed-forward, and a second
//! residual + LayerNorm follow.

use rand::Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{self, Init};

/// Which attention branches a block carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Parallel,
    TemporalOnly,
    SpatialOnly,
}

impl BlockKind {
    pub fn has_temporal(self) -> bool {
        self != BlockKind::SpatialOnly
    }

    pub fn has_spatial(self) -> bool {
        self != BlockKind::TemporalOnly
    }

    fn branches(self) -> usize {
        if self == BlockKind::Parallel {
            2
        } else {
            1
        }
    }
}

/// Block kinds for every layer: all parallel, or under the sequential
/// ablation the first half temporal-only and the rest spatial-only.
pub fn layer_kinds(cfg: &ModelConfig) -> Vec<BlockKind> {
    if cfg.ablation.sequential_st {
        let temporal = cfg.layers.div_ceil(2);
        (0..cfg.layers)
            .map(|l| {
                if l < temporal {
                    BlockKind::TemporalOnly
                } else {
                    BlockKind::SpatialOnly
                }
            })
            .collect()
    } else {
        vec![BlockKind::Parallel; cfg.layers]
    }
}

pub fn init_block<R: Rng>(
    init: &mut Init<'_, R>,
    prefix: &str,
    kind: BlockKind,
    cfg: &ModelConfig,
) -> Result<()> {
    let (c, d) = (cfg.c_in, cfg.c_d);
    for (axis, present) in [("t", kind.has_temporal()), ("s", kind.has_spatial())] {
        if !present {
            continue;
        }
        init.xavier(format!("{prefix}.q_{axis}"), &[c, d])?;
        init.xavier(format!("{prefix}.k_{axis}"), &[c, d])?;
        if !cfg.ablation.no_conv2former {
            init.xavier(format!("{prefix}.v_{axis}"), &[c, d])?;
        }
        init.dense(&format!("{prefix}.w_{axis}"), c, d)?;
    }
    init.dense(&format!("{prefix}.proj"), kind.branches() * d, c)?;
    init.constant(format!("{prefix}.ln1.gain"), &[c], 1.0)?;
    init.constant(format!("{prefix}.ln1.bias"), &[c], 0.0)?;
    init.dense(&format!("{prefix}.ffn1"), c, d)?;
    init.dense(&format!("{prefix}.ffn2"), c, d)?;
    init.dense(&format!("{prefix}.ffn3"), d, c)?;
    init.constant(format!("{prefix}.ln2.gain"), &[c], 1.0)?;
    init.constant(format!("{prefix}.ln2.bias"), &[c], 0.0)
}

/// Scaled dot-product scores `(x Wq)(x Wk)ᵀ / √C_d` over the second-to-last
/// axis of `x` (`[.., T, C]` → `[.., T, T]`).
pub fn scores(tape: &mut Tape, x: Var, wq: Var, wk: Var) -> Result<Var> {
    let q = nn::linear(tape, x, wq, None)?;
    let k = nn::linear(tape, x, wk, None)?;
    let cd = *tape.shape(q).last().expect("rank 4");
    let kt = tape.transpose(k)?;
    let s = tape.matmul(q, kt)?;
    Ok(tape.scale(s, 1.0 / (cd as f64).sqrt()))
}

/// Temporal `[B,N,q,q]` and spatial `[B,q,N,N]` score matrices.
#[derive(Clone, Copy, Debug)]
pub struct AttentionPair {
    pub temporal: Var,
    pub spatial: Var,
}

pub fn attention_scores(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    z: Var,
) -> Result<AttentionPair> {
    let p = |tape: &mut Tape, n: &str| tape.param(store, &format!("{prefix}.{n}"));
    let (qt, kt, qs, ks) = (
        p(tape, "q_t")?,
        p(tape, "k_t")?,
        p(tape, "q_s")?,
        p(tape, "k_s")?,
    );
    let temporal = scores(tape, z, qt, kt)?;
    let zs = tape.permute(z, &[0, 2, 1, 3])?;
    let spatial = scores(tape, zs, qs, ks)?;
    Ok(AttentionPair { temporal, spatial })
}

/// `(relu(scores) · (x W) + b) ⊙ v`. `x` must be laid out so that
/// `scores` contracts its second-to-last axis; `v = None` means no
/// modulation.
pub fn branch_mix(
    tape: &mut Tape,
    scores: Var,
    x: Var,
    w: Var,
    b: Var,
    v: Option<Var>,
) -> Result<Var> {
    let op = tape.relu(scores);
    let xw = nn::linear(tape, x, w, None)?;
    let agg = tape.matmul(op, xw)?;
    let out = tape.add_bias(agg, b)?;
    match v {
        Some(v) => tape.mul(out, v),
        None => Ok(out),
    }
}

/// `relu(A_S ⊙ A_ag)` with `A_ag` `[B,N,N]` repeated over the time axis of
/// `A_S` `[B,q,N,N]`.
pub fn gravity_inform(tape: &mut Tape, a_s: Var, a_ag: Var) -> Result<Var> {
    let q = tape.shape(a_s)[1];
    let g = tape.broadcast_axis(a_ag, 1, q)?;
    let gated = tape.mul(a_s, g)?;
    Ok(tape.relu(gated))
}

/// `W3 (gelu(x W1 + b1) ⊙ (x W2 + b2)) + b3`.
pub fn glu_ffn(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let gate = nn::dense(tape, store, &format!("{prefix}.ffn1"), x)?;
    let gate = tape.gelu(gate);
    let lin = nn::dense(tape, store, &format!("{prefix}.ffn2"), x)?;
    let h = tape.mul(gate, lin)?;
    nn::dense(tape, store, &format!("{prefix}.ffn3"), h)
}

#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub output: Var,
    /// Spatial scores before gating, `[B,q,N,N]`.
    pub spatial_scores: Option<Var>,
    /// `relu(A_S ⊙ A_ag)` when a gravity matrix was supplied.
    pub gated: Option<Var>,
}

fn finite(tape: &Tape, v: Var, prefix: &str, what: &str) -> Result<()> {
    tape.check_finite(v, &format!("{prefix} {what}"))
}

/// One block. `a_ag` is `[B,N,N]`; `None` leaves spatial attention ungated.
pub fn block_forward(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    z: Var,
    a_ag: Option<Var>,
    kind: BlockKind,
) -> Result<BlockOutput> {
    if tape.shape(z).len() != 4 {
        return Err(Error::shape(
            "block_forward",
            format!("z must be [B,N,q,C], got {:?}", tape.shape(z)),
        ));
    }
    let p = |tape: &mut Tape, n: &str| tape.param(store, &format!("{prefix}.{n}"));
    let value = |tape: &mut Tape, n: &str| -> Result<Option<Var>> {
        let name = format!("{prefix}.{n}");
        if store.contains(&name) {
            let w = tape.param(store, &name)?;
            Ok(Some(nn::linear(tape, z, w, None)?))
        } else {
            Ok(None)
        }
    };
    let mut branches = Vec::with_capacity(2);
    let mut out = BlockOutput {
        output: z,
        spatial_scores: None,
        gated: None,
    };
    if kind.has_temporal() {
        let (q, k) = (p(tape, "q_t")?, p(tape, "k_t")?);
        let a_t = scores(tape, z, q, k)?;
        finite(tape, a_t, prefix, "temporal scores")?;
        let (w, b) = (p(tape, "w_t.w")?, p(tape, "w_t.b")?);
        let v = value(tape, "v_t")?;
        branches.push(branch_mix(tape, a_t, z, w, b, v)?);
    }
    if kind.has_spatial() {
        let zs = tape.permute(z, &[0, 2, 1, 3])?;
        let (q, k) = (p(tape, "q_s")?, p(tape, "k_s")?);
        let a_s = scores(tape, zs, q, k)?;
        finite(tape, a_s, prefix, "spatial scores")?;
        out.spatial_scores = Some(a_s);
        let op = match a_ag {
            Some(g) => {
                let gated = gravity_inform(tape, a_s, g)?;
                out.gated = Some(gated);
                gated
            }
            None => a_s,
        };
        let (w, b) = (p(tape, "w_s.w")?, p(tape, "w_s.b")?);
        let mixed = branch_mix(tape, op, zs, w, b, None)?;
        let mixed = tape.permute(mixed, &[0, 2, 1, 3])?;
        let mixed = match value(tape, "v_s")? {
            Some(v) => tape.mul(mixed, v)?,
            None => mixed,
        };
        branches.push(mixed);
    }
    let cat = if branches.len() == 1 {
        branches[0]
    } else {
        tape.concat(&branches, 3)?
    };
    let proj = nn::dense(tape, store, &format!("{prefix}.proj"), cat)?;
    finite(tape, proj, prefix, "projection")?;
    let state = tape.add(proj, z)?;
    let (g1, b1) = (p(tape, "ln1.gain")?, p(tape, "ln1.bias")?);
    let state = tape.layer_norm(state, g1, b1)?;
    let ffn = glu_ffn(tape, store, prefix, state)?;
    finite(tape, ffn, prefix, "feed-forward")?;
    let res = tape.add(ffn, state)?;
    let (g2, b2) = (p(tape, "ln2.gain")?, p(tape, "ln2.bias")?);
    out.output = tape.layer_norm(res, g2, b2)?;
    finite(tape, out.output, prefix, "output")?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckConfig};
    use crate::tensor::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            nodes: 4,
            input_len: 4,
            c_in: 4,
            c_d: 2,
            ..ModelConfig::toy()
        }
    }

    fn block_params(cfg: &ModelConfig, kind: BlockKind, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_block(
            &mut Init {
                store: &mut store,
                rng: &mut rng,
            },
            "blk",
            kind,
            cfg,
        )
        .unwrap();
        store
    }

    fn random(shape: &[usize], seed: u64) -> Array {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Array::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn score_shapes_and_degenerate_inputs() {
        let cfg = ModelConfig {
            nodes: 6,
            input_len: 12,
            ..ModelConfig::default()
        };
        let store = block_params(&cfg, BlockKind::Parallel, 1);
        let mut tape = Tape::new();
        let z = tape.constant(random(&[1, 6, 12, 32], 2));
        let pair = attention_scores(&mut tape, &store, "blk", z).unwrap();
        assert_eq!(tape.shape(pair.temporal), &[1, 6, 12, 12]);
        assert_eq!(tape.shape(pair.spatial), &[1, 12, 6, 6]);

        let zero = tape.constant(Array::zeros([1, 6, 12, 32]));
        let pair = attention_scores(&mut tape, &store, "blk", zero).unwrap();
        assert!(tape.value(pair.temporal).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(pair.spatial).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_keys_give_constant_rows() {
        let mut tape = Tape::new();
        // every time step carries the same feature vector
        let row = [0.3, -0.7, 1.1];
        let x = Array::new([1, 1, 4, 3], row.iter().cycle().take(12).copied().collect()).unwrap();
        let x = tape.constant(x);
        let w = tape.constant(random(&[3, 2], 5));
        let s = scores(&mut tape, x, w, w).unwrap();
        for r in tape.value(s).data().chunks(4) {
            assert!(r.iter().all(|&v| (v - r[0]).abs() < 1e-15));
        }
    }

    #[test]
    fn branch_mix_degenerate_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(random(&[1, 2, 3, 4], 1));
        let w = tape.constant(random(&[4, 2], 2));
        let b = tape.constant(Array::from_vec(vec![0.5, -1.5]));
        let v = tape.constant(random(&[1, 2, 3, 2], 3));
        let neg = tape.constant(random(&[1, 2, 3, 3], 4).map(|s| -s.abs()));
        let out = branch_mix(&mut tape, neg, x, w, b, Some(v)).unwrap();
        let vv = tape.value(v).data().to_vec();
        for (i, &o) in tape.value(out).data().iter().enumerate() {
            let bias = [0.5, -1.5][i % 2];
            assert_eq!(o, bias * vv[i]);
        }
        let s = tape.constant(random(&[1, 2, 3, 3], 6));
        let ones = tape.constant(Array::ones([1, 2, 3, 2]));
        let plain = branch_mix(&mut tape, s, x, w, b, None).unwrap();
        let modulated = branch_mix(&mut tape, s, x, w, b, Some(ones)).unwrap();
        assert_eq!(tape.value(plain), tape.value(modulated));
    }

    #[test]
    fn relu_swap_operator_matches_loop() {
        // 2 nodes, relu([[0,1],[1,0]]) swaps neighbours
        let swap = Array::new([1, 1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let x = random(&[1, 1, 2, 3], 9);
        let w = random(&[3, 2], 10);
        let b = [0.25, -0.5];
        let mut tape = Tape::new();
        let (sv, xv, wv) = (
            tape.constant(swap.clone()),
            tape.constant(x.clone()),
            tape.constant(w.clone()),
        );
        let bv = tape.constant(Array::from_vec(b.to_vec()));
        let out = branch_mix(&mut tape, sv, xv, wv, bv, None).unwrap();
        let got = tape.value(out).data().to_vec();
        for i in 0..2 {
            for c in 0..2 {
                let mut acc = 0.0;
                for j in 0..2 {
                    let a = swap.data()[i * 2 + j].max(0.0);
                    for k in 0..3 {
                        acc += a * x.data()[j * 3 + k] * w.data()[k * 2 + c];
                    }
                }
                assert!((got[i * 2 + c] - (acc + b[c])).abs() < 1e-14);
            }
        }
        let xw = x.reshape([2, 3]).unwrap().matmul2(&w).unwrap();
        for c in 0..2 {
            assert!((got[c] - xw.data()[2 + c] - b[c]).abs() < 1e-14);
        }
    }

    #[test]
    fn gravity_gate_cases() {
        let mut tape = Tape::new();
        let a_s = tape.constant(Array::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let g = tape.constant(Array::new([1, 2, 2], vec![0.5, 0.0, 1.0, 2.0]).unwrap());
        let out = gravity_inform(&mut tape, a_s, g).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5, 0.0, 3.0, 8.0]);

        let a_s = tape.constant(random(&[2, 3, 4, 4], 3));
        let ones = tape.constant(Array::ones([2, 4, 4]));
        let out = gravity_inform(&mut tape, a_s, ones).unwrap();
        let plain = tape.relu(a_s);
        assert_eq!(tape.value(out), tape.value(plain));
    }

    #[test]
    fn glu_ffn_zero_input() {
        let cfg = small();
        let mut store = block_params(&cfg, BlockKind::Parallel, 3);
        for s in ["ffn1.b", "ffn2.b", "ffn3.b"] {
            let b = store.get_mut(&format!("blk.{s}")).unwrap();
            b.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let x = tape.constant(Array::zeros([1, 2, 3, 4]));
        let y = glu_ffn(&mut tape, &store, "blk", x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn glu_ffn_gradcheck() {
        let cfg = small();
        let full = block_params(&cfg, BlockKind::Parallel, 4);
        let mut store = ParamStore::new();
        for (n, a) in full.iter().filter(|(n, _)| n.contains("ffn")) {
            store.insert(n, a.clone()).unwrap();
        }
        let x = random(&[1, 2, 3, 4], 7);
        let build = |tape: &mut Tape, s: &ParamStore| {
            let xv = tape.constant(x.clone());
            let y = glu_ffn(tape, s, "blk", xv)?;
            let y = tape.tanh(y);
            Ok(tape.sum_all(y))
        };
        let r = grad_check(&store, &GradCheckConfig::new(1e-5, 1e-4), build).unwrap();
        assert!(r.passed(), "{:?}", r.worst());
    }

    #[test]
    fn zero_weights_give_normalised_residual() {
        let cfg = small();
        let mut store = block_params(&cfg, BlockKind::Parallel, 5);
        for (n, a) in store.iter_mut() {
            if !n.contains("ln") {
                a.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let z = random(&[1, 4, 4, 4], 8);
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let out = block_forward(&mut tape, &store, "blk", zv, None, BlockKind::Parallel).unwrap();
        assert_eq!(tape.shape(out.output), &[1, 4, 4, 4]);
        let g = tape.constant(Array::ones([4]));
        let b = tape.constant(Array::zeros([4]));
        let ln = tape.layer_norm(zv, g, b).unwrap();
        let ln = tape.layer_norm(ln, g, b).unwrap();
        for (x, y) in tape
            .value(out.output)
            .data()
            .iter()
            .zip(tape.value(ln).data())
        {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn permute_nodes(a: &Array, perm: &[usize], axes: &[usize]) -> Array {
        let mut out = a.clone();
        let total = a.len();
        let strides = a.strides();
        for flat in 0..total {
            let mut rem = flat;
            let mut src = 0;
            for (ax, &st) in strides.iter().enumerate() {
                let i = rem / st;
                rem %= st;
                let mapped = if axes.contains(&ax) { perm[i] } else { i };
                src += mapped * st;
            }
            out.data_mut()[flat] = a.data()[src];
        }
        out
    }

    #[test]
    fn node_permutation_equivariance() {
        let cfg = small();
        let store = block_params(&cfg, BlockKind::Parallel, 6);
        let z = random(&[2, 4, 4, 4], 11);
        let g = random(&[2, 4, 4], 12).map(|v| v.abs() + 0.1);
        let perm = [2, 0, 3, 1];
        let run = |z: &Array, g: &Array| {
            let mut tape = Tape::new();
            let zv = tape.constant(z.clone());
            let gv = tape.constant(g.clone());
            let o =
                block_forward(&mut tape, &store, "blk", zv, Some(gv), BlockKind::Parallel).unwrap();
            tape.value(o.output).clone()
        };
        let base = run(&z, &g);
        let permuted = run(
            &permute_nodes(&z, &perm, &[1]),
            &permute_nodes(&g, &perm, &[1, 2]),
        );
        let expect = permute_nodes(&base, &perm, &[1]);
        for (x, y) in permuted.data().iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn block_gradcheck_all_variants() {
        let x = random(&[1, 4, 4, 4], 13);
        let g = random(&[1, 4, 4], 14).map(|v| v.abs() + 0.2);
        for (kind, no_v) in [
            (BlockKind::Parallel, false),
            (BlockKind::Parallel, true),
            (BlockKind::TemporalOnly, false),
            (BlockKind::SpatialOnly, false),
        ] {
            let mut cfg = small();
            cfg.ablation.no_conv2former = no_v;
            let store = block_params(&cfg, kind, 15);
            let build = |tape: &mut Tape, s: &ParamStore| {
                let zv = tape.constant(x.clone());
                let gv = tape.constant(g.clone());
                let o = block_forward(tape, s, "blk", zv, Some(gv), kind)?;
                let y = tape.tanh(o.output);
                Ok(tape.sum_all(y))
            };
            let r = grad_check(&store, &GradCheckConfig::new(1e-5, 1e-3), build).unwrap();
            assert!(r.passed(), "{kind:?} no_v={no_v}: {:?}", r.worst());
        }
    }
}
