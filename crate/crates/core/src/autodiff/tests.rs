use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::tensor::Array;

fn store_of(entries: &[(&str, Array)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, a) in entries {
        s.insert(*n, a.clone()).unwrap();
    }
    s
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Array {
    let n = shape.iter().product();
    Array::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

fn random_shape(rank: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..rank).map(|_| rng.gen_range(1..=8)).collect()
}

/// Contract an op output to a scalar with fixed random weights so every
/// output entry carries a distinct adjoint.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let w = random(tape.shape(y), -1.0, 1.0, &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(y, w).unwrap();
    tape.sum_all(p)
}

const SEEDS: u64 = 20;

fn assert_fd<F>(store: &ParamStore, tol: f64, build: F)
where
    F: Fn(&mut Tape, &ParamStore) -> crate::Result<Var>,
{
    let report = grad_check(store, &GradCheckConfig::new(1e-5, tol), build).unwrap();
    let worst = report.worst().unwrap();
    assert!(
        report.passed(),
        "worst {} rel err {:.3e} (analytic {}, numeric {})",
        worst.name,
        worst.max_rel_error,
        worst.analytic,
        worst.numeric
    );
}

#[test]
fn matmul_identity_and_scalar() {
    let mut t = Tape::new();
    let a = t.constant(Array::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let i = t.constant(Array::eye(2));
    let c = t.matmul(a, i).unwrap();
    assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

    let x = t.constant(Array::from_rows(&[&[2.0]]));
    let y = t.constant(Array::from_rows(&[&[3.0]]));
    let z = t.matmul(x, y).unwrap();
    assert_eq!(t.value(z).data(), &[6.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Array::zeros([2, 3]));
    let b = t.constant(Array::zeros([2, 3]));
    let err = t.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert!(matches!(err, Error::Dimension { .. }));
}

#[test]
fn matmul_sum_gradient_is_ones_times_bt() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[3, 4], -1.0, 1.0, &mut rng);
    let b = random(&[4, 5], -1.0, 1.0, &mut rng);
    let store = store_of(&[("a", a), ("b", b.clone())]);
    let mut t = Tape::new();
    let av = t.param(&store, "a").unwrap();
    let bv = t.param(&store, "b").unwrap();
    let c = t.matmul(av, bv).unwrap();
    let loss = t.sum_all(c);
    let g = t.backward(loss, &store).unwrap();
    let expected = Array::ones([3, 5]).matmul2(&b.t().unwrap()).unwrap();
    for (x, y) in g.get("a").unwrap().data().iter().zip(expected.data()) {
        assert!((x - y).abs() < 1e-12);
    }
    assert_fd(&store, 1e-6, |t, s| {
        let a = t.param(s, "a")?;
        let b = t.param(s, "b")?;
        let c = t.matmul(a, b)?;
        Ok(t.sum_all(c))
    });
}

#[test]
fn matmul_batch_broadcast_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random(&[2, 1, 3, 4], -1.0, 1.0, &mut rng);
    let b = random(&[3, 4, 2], -1.0, 1.0, &mut rng);
    let mut t = Tape::new();
    let av = t.constant(a.clone());
    let bv = t.constant(b.clone());
    let c = t.matmul(av, bv).unwrap();
    assert_eq!(t.shape(c), &[2, 3, 3, 2]);
    for i in 0..2 {
        for j in 0..3 {
            for r in 0..3 {
                for col in 0..2 {
                    let mut s = 0.0;
                    for k in 0..4 {
                        s += a.get(&[i, 0, r, k]).unwrap() * b.get(&[j, k, col]).unwrap();
                    }
                    assert!((t.value(c).get(&[i, j, r, col]).unwrap() - s).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn activation_values() {
    let mut t = Tape::new();
    let x = t.constant(Array::from_vec(vec![0.0, -1.5, 2.0]));
    let sp = t.softplus(x);
    assert!((t.value(sp).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    let r = t.relu(x);
    assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
    assert!("swish".parse::<Activation>().is_err());
    assert_eq!("GELU".parse::<Activation>().unwrap(), Activation::Gelu);
}

#[test]
fn softplus_derivative_is_sigmoid() {
    let store = store_of(&[("x", Array::scalar(1.0))]);
    let mut t = Tape::new();
    let x = t.param(&store, "x").unwrap();
    let y = t.softplus(x);
    let g = t.backward(y, &store).unwrap();
    let d = g.get("x").unwrap().item().unwrap();
    assert!((d - 0.731_058_578_630_004_9).abs() < 1e-12);
    assert_fd(&store, 1e-6, |t, s| {
        let x = t.param(s, "x")?;
        Ok(t.softplus(x))
    });
}

#[test]
fn pow_values_and_exponent_gradient() {
    let mut t = Tape::new();
    let b = t.constant(Array::from_vec(vec![2.0]));
    let e = t.scalar(3.0);
    let y = t.pow(b, e).unwrap();
    assert_eq!(t.value(y).data(), &[8.0]);
    let bb = t.constant(Array::full([2, 3], 0.7));
    let zero = t.scalar(0.0);
    let ones = t.pow(bb, zero).unwrap();
    assert!(t.value(ones).data().iter().all(|&v| v == 1.0));

    let neg = t.constant(Array::from_vec(vec![-0.5]));
    assert!(matches!(t.pow(neg, e), Err(Error::Domain { .. })));

    let e_val = std::f64::consts::E;
    let store = store_of(&[("e", Array::scalar(1.0))]);
    let mut t = Tape::new();
    let base = t.constant(Array::from_vec(vec![e_val]));
    let ex = t.param(&store, "e").unwrap();
    let y = t.pow(base, ex).unwrap();
    let loss = t.sum_all(y);
    let g = t.backward(loss, &store).unwrap();
    assert!((g.get("e").unwrap().item().unwrap() - e_val).abs() < 1e-12);
    assert_fd(&store, 1e-6, |t, s| {
        let base = t.constant(Array::from_vec(vec![e_val]));
        let ex = t.param(s, "e")?;
        let y = t.pow(base, ex)?;
        Ok(t.sum_all(y))
    });
}

#[test]
fn reduce_mean_values_and_errors() {
    let mut t = Tape::new();
    let x = t.constant(Array::from_vec(vec![1.0, 2.0, 3.0, 6.0]));
    let m = t.mean(x, &[0]).unwrap();
    assert_eq!(t.value(m).item().unwrap(), 3.0);
    let same = t.mean(x, &[]).unwrap();
    assert_eq!(t.value(same), t.value(x));
    let empty = t.constant(Array::zeros([2, 0]));
    assert!(matches!(t.mean(empty, &[1]), Err(Error::Domain { .. })));
    assert!(t.mean(x, &[1]).is_err());
}

#[test]
fn reduce_mean_gradient_is_reciprocal_extent() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let store = store_of(&[("x", random(&[3, 4, 5], -1.0, 1.0, &mut rng))]);
    let mut t = Tape::new();
    let x = t.param(&store, "x").unwrap();
    let m = t.mean(x, &[0, 2]).unwrap();
    let loss = t.sum_all(m);
    let g = t.backward(loss, &store).unwrap();
    assert!(g
        .get("x")
        .unwrap()
        .data()
        .iter()
        .all(|&v| (v - 1.0 / 15.0).abs() < 1e-15));
}

#[test]
fn layer_norm_cases() {
    let mut t = Tape::new();
    let g = t.constant(Array::ones([3]));
    let b = t.constant(Array::zeros([3]));
    let x = t.constant(Array::full([2, 3], 4.2));
    let y = t.layer_norm(x, g, b).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));

    let g2 = t.constant(Array::ones([2]));
    let b2 = t.constant(Array::zeros([2]));
    let x2 = t.constant(Array::from_vec(vec![-1.0, 1.0]));
    let y2 = t.layer_norm(x2, g2, b2).unwrap();
    let d = t.value(y2).data();
    assert!((d[0] + 1.0).abs() < 1e-5 && (d[1] - 1.0).abs() < 1e-5);

    let e = t.constant(Array::zeros([4, 0]));
    let ge = t.constant(Array::zeros([0]));
    assert!(matches!(t.layer_norm(e, ge, ge), Err(Error::Domain { .. })));
}

#[test]
fn backward_product_rule_and_relu() {
    let store = store_of(&[("x", Array::scalar(3.0)), ("y", Array::scalar(4.0))]);
    let mut t = Tape::new();
    let x = t.param(&store, "x").unwrap();
    let y = t.param(&store, "y").unwrap();
    let l = t.mul(x, y).unwrap();
    let g = t.backward(l, &store).unwrap();
    assert_eq!(g.get("x").unwrap().item().unwrap(), 4.0);
    assert_eq!(g.get("y").unwrap().item().unwrap(), 3.0);

    let store = store_of(&[("x", Array::from_vec(vec![-1.0, 2.0]))]);
    let mut t = Tape::new();
    let x = t.param(&store, "x").unwrap();
    let r = t.relu(x);
    let l = t.sum_all(r);
    let g = t.backward(l, &store).unwrap();
    assert_eq!(g.get("x").unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar_and_zeroes_unused() {
    let store = store_of(&[("used", Array::ones([3])), ("unused", Array::ones([2, 2]))]);
    let mut t = Tape::new();
    let u = t.param(&store, "used").unwrap();
    let _ = t.param(&store, "unused").unwrap();
    let sq = t.mul(u, u).unwrap();
    assert!(matches!(t.backward(sq, &store), Err(Error::Contract(_))));
    let l = t.sum_all(sq);
    let g = t.backward(l, &store).unwrap();
    assert_eq!(g.get("unused").unwrap(), &Array::zeros([2, 2]));
    assert_eq!(g.get("used").unwrap().data(), &[2.0, 2.0, 2.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let store = store_of(&[("w", Array::from_vec(vec![0.5, -0.5]))]);
    let mut t = Tape::new();
    let c = t.constant(Array::from_vec(vec![1.0, 2.0]));
    let w = t.param(&store, "w").unwrap();
    let p = t.mul(c, w).unwrap();
    let l = t.sum_all(p);
    let adj = t.adjoints(l).unwrap();
    assert!(adj[c.index()].is_none());
    assert!(adj[w.index()].is_some());
}

#[test]
fn gradcheck_quadratic_softplus_and_negative_control() {
    let store = store_of(&[("x", Array::from_vec(vec![1.0, 2.0]))]);
    let quad = |t: &mut Tape, s: &ParamStore| {
        let x = t.param(s, "x")?;
        let sq = t.mul(x, x)?;
        Ok(t.sum_all(sq))
    };
    let mut t = Tape::new();
    let l = quad(&mut t, &store).unwrap();
    let g = t.backward(l, &store).unwrap();
    assert_eq!(g.get("x").unwrap().data(), &[2.0, 4.0]);
    let report = grad_check(&store, &GradCheckConfig::new(1e-5, 1e-8), quad).unwrap();
    assert!(report.passed(), "{:?}", report);

    let chain = |t: &mut Tape, s: &ParamStore| {
        let x = t.param(s, "x")?;
        let a = t.softplus(x);
        let b = t.softplus(a);
        let c = t.mul(b, x)?;
        Ok(t.sum_all(c))
    };
    let report = grad_check(&store, &GradCheckConfig::new(1e-5, 1e-6), chain).unwrap();
    assert!(report.passed(), "{:?}", report);

    let corrupted = GradCheckConfig {
        fault: FaultInjection::FlipActivationSign,
        ..GradCheckConfig::new(1e-5, 1e-6)
    };
    let single = |t: &mut Tape, s: &ParamStore| {
        let x = t.param(s, "x")?;
        let a = t.softplus(x);
        let c = t.mul(a, x)?;
        Ok(t.sum_all(c))
    };
    let report = grad_check(&store, &corrupted, single).unwrap();
    assert!(!report.passed());
}

#[test]
fn gradcheck_reports_non_finite() {
    let store = store_of(&[("x", Array::from_vec(vec![0.0]))]);
    let res = grad_check(&store, &GradCheckConfig::default(), |t, s| {
        let x = t.param(s, "x")?;
        let x = t.clamp_min(x, 0.0);
        let h = t.scalar(0.5);
        let y = t.pow(x, h)?;
        Ok(t.sum_all(y))
    });
    match res {
        Err(Error::Numeric { context }) => assert!(context.contains("`x`")),
        other => panic!("expected numeric error, got {other:?}"),
    }
}

// Finite-difference property over every primitive, 20 seeds, random shapes
// with extents up to 8.

#[test]
fn fd_elementwise_binary() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = random_shape(rng.gen_range(1..=3), &mut rng);
        let store = store_of(&[
            ("a", random(&shape, -2.0, 2.0, &mut rng)),
            ("b", random(&shape, -2.0, 2.0, &mut rng)),
        ]);
        assert_fd(&store, 1e-6, |t, s| {
            let a = t.param(s, "a")?;
            let b = t.param(s, "b")?;
            let x = t.add(a, b)?;
            let y = t.sub(x, b)?;
            let z = t.mul(y, b)?;
            let z = t.add_const(z, 0.3);
            let z = t.scale(z, -1.7);
            Ok(weighted_sum(t, z, seed))
        });
    }
}

#[test]
fn fd_bias_and_scalar_broadcast() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let shape = random_shape(rng.gen_range(1..=3), &mut rng);
        let c = *shape.last().unwrap();
        let store = store_of(&[
            ("x", random(&shape, -2.0, 2.0, &mut rng)),
            ("b", random(&[c], -1.0, 1.0, &mut rng)),
            ("s", Array::scalar(rng.gen_range(-2.0..2.0))),
        ]);
        assert_fd(&store, 1e-6, |t, st| {
            let x = t.param(st, "x")?;
            let b = t.param(st, "b")?;
            let s = t.param(st, "s")?;
            let y = t.add_bias(x, b)?;
            let y = t.mul_scalar(y, s)?;
            Ok(weighted_sum(t, y, seed))
        });
    }
}

#[test]
fn fd_activations() {
    let kinds = [
        Activation::Relu,
        Activation::Tanh,
        Activation::Gelu,
        Activation::Softplus,
        Activation::Sigmoid,
    ];
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let shape = random_shape(rng.gen_range(1..=3), &mut rng);
        let store = store_of(&[("x", random(&shape, -3.0, 3.0, &mut rng))]);
        for kind in kinds {
            assert_fd(&store, 1e-6, |t, s| {
                let x = t.param(s, "x")?;
                let y = t.activation(x, kind);
                Ok(weighted_sum(t, y, seed))
            });
        }
        assert_fd(&store, 1e-6, |t, s| {
            let x = t.param(s, "x")?;
            let y = t.abs(x);
            let y = t.clamp_min(y, 0.5);
            Ok(weighted_sum(t, y, seed))
        });
    }
}

#[test]
fn fd_pow() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let shape = random_shape(rng.gen_range(1..=3), &mut rng);
        let store = store_of(&[
            ("base", random(&shape, 0.2, 3.0, &mut rng)),
            ("e", Array::scalar(rng.gen_range(0.1..2.5))),
        ]);
        assert_fd(&store, 1e-6, |t, s| {
            let b = t.param(s, "base")?;
            let e = t.param(s, "e")?;
            let y = t.pow(b, e)?;
            Ok(weighted_sum(t, y, seed))
        });
    }
}

#[test]
fn fd_matmul_batched() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let batch = random_shape(rng.gen_range(0..=2), &mut rng);
        let (m, k, n) = (
            rng.gen_range(1..=8),
            rng.gen_range(1..=8),
            rng.gen_range(1..=8),
        );
        let mut sa = batch.clone();
        sa.extend([m, k]);
        // rhs either shares the batch or is a plain matrix
        let sb = if seed % 2 == 0 {
            let mut s = batch.clone();
            s.extend([k, n]);
            s
        } else {
            vec![k, n]
        };
        let store = store_of(&[
            ("a", random(&sa, -1.0, 1.0, &mut rng)),
            ("b", random(&sb, -1.0, 1.0, &mut rng)),
        ]);
        assert_fd(&store, 1e-6, |t, s| {
            let a = t.param(s, "a")?;
            let b = t.param(s, "b")?;
            let c = t.matmul(a, b)?;
            Ok(weighted_sum(t, c, seed))
        });
    }
}

#[test]
fn fd_reductions() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let rank = rng.gen_range(1..=4);
        let shape = random_shape(rank, &mut rng);
        let axes: Vec<usize> = (0..rank).filter(|_| rng.gen_bool(0.5)).collect();
        let store = store_of(&[("x", random(&shape, -2.0, 2.0, &mut rng))]);
        assert_fd(&store, 1e-6, |t, s| {
            let x = t.param(s, "x")?;
            let m = t.mean(x, &axes)?;
            let q = t.sum(x, &axes)?;
            let y = t.mul(m, q)?;
            Ok(weighted_sum(t, y, seed))
        });
    }
}

#[test]
fn fd_layer_norm() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let mut shape = random_shape(rng.gen_range(0..=2), &mut rng);
        let c = rng.gen_range(2..=8);
        shape.push(c);
        let store = store_of(&[
            ("x", random(&shape, -2.0, 2.0, &mut rng)),
            ("g", random(&[c], 0.5, 1.5, &mut rng)),
            ("b", random(&[c], -0.5, 0.5, &mut rng)),
        ]);
        assert_fd(&store, 1e-6, |t, s| {
            let x = t.param(s, "x")?;
            let g = t.param(s, "g")?;
            let b = t.param(s, "b")?;
            let y = t.layer_norm(x, g, b)?;
            Ok(weighted_sum(t, y, seed))
        });
    }
}

#[test]
fn fd_structural_ops() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let rank = rng.gen_range(2..=4);
        let shape = random_shape(rank, &mut rng);
        let axis = rng.gen_range(0..rank);
        let mut other = shape.clone();
        other[axis] = rng.gen_range(1..=8);
        let mut perm: Vec<usize> = (0..rank).collect();
        for i in (1..rank).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let ins = rng.gen_range(0..=rank);
        let count = rng.gen_range(1..=4);
        let store = store_of(&[
            ("a", random(&shape, -1.0, 1.0, &mut rng)),
            ("b", random(&other, -1.0, 1.0, &mut rng)),
        ]);
        assert_fd(&store, 1e-6, |t, s| {
            let a = t.param(s, "a")?;
            let b = t.param(s, "b")?;
            let c = t.concat(&[a, b, a], axis)?;
            let c = t.slice(c, axis, 1, t.shape(c)[axis] - 1)?;
            let c = t.permute(c, &perm)?;
            let c = t.transpose(c)?;
            let n = t.value(c).len();
            let c = t.reshape(c, &[n])?;
            let c = t.reshape(c, &[1, n])?;
            let d = t.broadcast_axis(a, ins, count)?;
            let l1 = weighted_sum(t, c, seed);
            let l2 = weighted_sum(t, d, seed + 1);
            t.add(l1, l2)
        });
    }
}

#[test]
fn fd_gather() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let rows = rng.gen_range(1..=8);
        let width = rng.gen_range(1..=8);
        let prefix = random_shape(2, &mut rng);
        let idx: Vec<usize> = (0..prefix.iter().product::<usize>())
            .map(|_| rng.gen_range(0..rows))
            .collect();
        let store = store_of(&[("table", random(&[rows, width], -1.0, 1.0, &mut rng))]);
        assert_fd(&store, 1e-6, |t, s| {
            let tab = t.param(s, "table")?;
            let g = t.gather(tab, &idx, &prefix)?;
            Ok(weighted_sum(t, g, seed))
        });
    }
}

#[test]
fn gather_rejects_out_of_range() {
    let mut t = Tape::new();
    let tab = t.constant(Array::zeros([3, 2]));
    assert!(matches!(t.gather(tab, &[0, 3], &[2]), Err(Error::Range(_))));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    fn shape_and_data() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
        prop::collection::vec(1usize..5, 2..4).prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            (Just(shape), prop::collection::vec(-10.0f64..10.0, n))
        })
    }

    proptest! {
        #[test]
        fn reshape_roundtrip_and_transpose_involution((shape, data) in shape_and_data()) {
            let mut t = Tape::new();
            let x = t.constant(Array::new(shape.clone(), data).unwrap());
            let flat = t.reshape(x, &[t.value(x).len()]).unwrap();
            let back = t.reshape(flat, &shape).unwrap();
            prop_assert_eq!(t.value(back), t.value(x));
            let tt = t.transpose(x).unwrap();
            let tt = t.transpose(tt).unwrap();
            prop_assert_eq!(t.value(tt), t.value(x));
        }

        #[test]
        fn concat_then_slice_recovers((shape, data) in shape_and_data(), axis_seed in 0usize..8) {
            let axis = axis_seed % shape.len();
            let mut t = Tape::new();
            let a = t.constant(Array::new(shape.clone(), data.clone()).unwrap());
            let b = t.constant(Array::new(shape.clone(), data.iter().map(|v| v * 2.0).collect()).unwrap());
            let c = t.concat(&[a, b], axis).unwrap();
            let ea = t.slice(c, axis, 0, shape[axis]).unwrap();
            let eb = t.slice(c, axis, shape[axis], shape[axis]).unwrap();
            prop_assert_eq!(t.value(ea), t.value(a));
            prop_assert_eq!(t.value(eb), t.value(b));
        }
    }
}
