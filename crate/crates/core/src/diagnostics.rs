//! Attention inspection: near-zero fractions, row entropy and rank
//! correlation against reference matrices.

use crate::adagravity;
use crate::autodiff::{grad_check, GradCheckConfig, GradCheckReport, Tape};
use crate::config::ModelConfig;
use crate::data::synthetic::{generate_scenario, simulate, ScenarioOverrides};
use crate::error::{Error, Result};
use crate::model::Gravityformer;
use crate::tensor::Array;
use crate::training::PreparedData;

/// Entries below this fraction of their row's largest magnitude count as
/// near zero.
pub const NEAR_ZERO_FRACTION: f64 = 0.01;

/// Fraction of entries with `|e| < 0.01 · max_row |e|`, rows taken along the
/// last axis. A row that is entirely zero counts as fully near zero.
pub fn sparsity(m: &Array) -> f64 {
    let width = *m.shape().last().unwrap_or(&1);
    if m.is_empty() || width == 0 {
        return 0.0;
    }
    let mut near = 0usize;
    for row in m.data().chunks(width) {
        let top = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        near += if top == 0.0 {
            width
        } else {
            row.iter()
                .filter(|v| v.abs() < NEAR_ZERO_FRACTION * top)
                .count()
        };
    }
    near as f64 / m.len() as f64
}

/// Mean Shannon entropy (nats) of the rows after normalising `|e|` to sum to
/// one. All-zero rows contribute zero.
pub fn row_entropy(m: &Array) -> f64 {
    let width = *m.shape().last().unwrap_or(&1);
    if m.is_empty() || width == 0 {
        return 0.0;
    }
    let rows = m.len() / width;
    let total: f64 = m
        .data()
        .chunks(width)
        .map(|row| {
            let s: f64 = row.iter().map(|v| v.abs()).sum();
            if s == 0.0 {
                return 0.0;
            }
            row.iter()
                .map(|v| v.abs() / s)
                .filter(|&p| p > 0.0)
                .map(|p| -p * p.ln())
                .sum::<f64>()
        })
        .sum();
    total / rows as f64
}

/// Off-diagonal entries of a square matrix in row-major order.
pub fn off_diagonal(m: &Array) -> Result<Vec<f64>> {
    let n = match m.shape() {
        [a, b] if a == b => *a,
        s => {
            return Err(Error::Dimension {
                op: "off_diagonal",
                lhs: s.to_vec(),
                rhs: vec![],
            })
        }
    };
    let mut out = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                out.push(m.data()[i * n + j]);
            }
        }
    }
    Ok(out)
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Spearman rank correlation. A constant input gives 0.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Dimension {
            op: "spearman",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    Ok(pearson(&average_ranks(a), &average_ranks(b)))
}

/// Spatial attention of one layer for one window.
#[derive(Clone, Debug)]
pub struct SampleAttention {
    pub start: usize,
    /// `relu(A_S)`, `[q, N, N]`.
    pub plain: Array,
    /// `relu(A_S ⊙ A_ag)`, `[q, N, N]`; absent without gravity.
    pub gated: Option<Array>,
    /// `A_ag`, `[N, N]`.
    pub gravity: Option<Array>,
}

fn sample_slice(a: &Array, b: usize, shape: Vec<usize>) -> Array {
    let len: usize = shape.iter().product();
    Array::new(shape, a.data()[b * len..(b + 1) * len].to_vec()).expect("slice matches shape")
}

/// Spatial attention matrices of `layer` (0-based) for each window start.
pub fn layer_attention(
    model: &Gravityformer,
    data: &PreparedData,
    starts: &[usize],
    layer: usize,
) -> Result<Vec<SampleAttention>> {
    let cfg = &model.config;
    if layer >= cfg.layers {
        return Err(Error::Range(format!(
            "layer {} requested, model has {}",
            layer + 1,
            cfg.layers
        )));
    }
    let (n, q) = (cfg.nodes, cfg.input_len);
    let mut out = Vec::with_capacity(starts.len());
    for chunk in starts.chunks(16) {
        let batch = data.batch(chunk)?;
        let mut tape = Tape::new();
        let trace = model.forward(&mut tape, &batch, data.scalers.activity)?;
        let lt = &trace.layers[layer];
        let scores = lt
            .spatial_scores
            .ok_or_else(|| Error::Range(format!("layer {} has no spatial attention", layer + 1)))?;
        let plain = tape.value(scores).map(|v| v.max(0.0));
        let gated = lt.gated.map(|g| tape.value(g).clone());
        let gravity = lt.gravity.map(|g| tape.value(g).clone());
        for (b, &start) in chunk.iter().enumerate() {
            out.push(SampleAttention {
                start,
                plain: sample_slice(&plain, b, vec![q, n, n]),
                gated: gated.as_ref().map(|g| sample_slice(g, b, vec![q, n, n])),
                gravity: gravity.as_ref().map(|g| sample_slice(g, b, vec![n, n])),
            });
        }
    }
    Ok(out)
}

/// The model's `A_d` as used in its forward pass.
pub fn distance_term(model: &Gravityformer) -> Result<Array> {
    let mut tape = Tape::new();
    let v = adagravity::distance_term(&mut tape, &model.params, &model.kernel, &model.config)?;
    Ok(tape.value(v).clone())
}

/// Element-wise mean of `A_ag` over samples.
pub fn mean_gravity(samples: &[SampleAttention]) -> Option<Array> {
    let first = samples.first()?.gravity.as_ref()?;
    let mut acc = Array::zeros(first.shape().to_vec());
    for s in samples {
        let g = s.gravity.as_ref()?;
        for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
            *a += v;
        }
    }
    let k = samples.len() as f64;
    Some(acc.map(|v| v / k))
}

/// Per-sample sparsity of plain and gated attention, averaged over samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparsitySummary {
    pub plain: f64,
    pub gated: Option<f64>,
}

pub fn sparsity_summary(samples: &[SampleAttention]) -> SparsitySummary {
    let k = samples.len().max(1) as f64;
    let plain = samples.iter().map(|s| sparsity(&s.plain)).sum::<f64>() / k;
    let gated = samples
        .iter()
        .map(|s| s.gated.as_ref().map(sparsity))
        .sum::<Option<f64>>()
        .map(|t| t / k);
    SparsitySummary { plain, gated }
}

/// Finite-difference check of every parameter gradient of `cfg`, on a
/// small synthetic city sized to the config and a batch of two windows.
pub fn end_to_end_gradcheck(
    cfg: &ModelConfig,
    seed: u64,
    check: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let overrides = ScenarioOverrides {
        steps_per_day: Some(cfg.steps_per_day),
        ..ScenarioOverrides::default()
    };
    let steps_needed = 12 * (cfg.input_len + cfg.horizon);
    let days = steps_needed.div_ceil(cfg.steps_per_day).max(1);
    let panel = simulate(&generate_scenario(seed, cfg.nodes, days, &overrides)?);
    let cfg = ModelConfig {
        seed,
        ..cfg.clone()
    };
    let model = Gravityformer::new(cfg.clone(), &panel.distances)?;
    let data = PreparedData::new(&panel, cfg.input_len, cfg.horizon)?;
    let batch = data.batch(&[0, 1])?;
    let scaler = data.scalers.activity;
    grad_check(&model.params, check, |tape, store| {
        Ok(model.loss_with(tape, store, &batch, scaler)?.1)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adagravity::classic_gravity;
    use crate::data::synthetic::{routing_probabilities, DEFAULT_DAYS, DEFAULT_NODES};
    use crate::training::Split;

    #[test]
    fn sparsity_examples() {
        let m = Array::from_rows(&[&[1.0, 0.005, 0.5], &[0.0, 0.0, 0.0]]);
        assert!((sparsity(&m) - 4.0 / 6.0).abs() < 1e-15);
        let m = Array::from_rows(&[&[-2.0, 0.01]]);
        assert_eq!(sparsity(&m), 0.5);
        assert_eq!(sparsity(&Array::ones([3, 3])), 0.0);
    }

    #[test]
    fn entropy_examples() {
        assert!((row_entropy(&Array::ones([2, 4])) - 4f64.ln()).abs() < 1e-15);
        assert_eq!(row_entropy(&Array::from_rows(&[&[0.0, 3.0, 0.0]])), 0.0);
    }

    #[test]
    fn spearman_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&a, &[10.0, 20.0, 30.0, 1e6]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(
            average_ranks(&[5.0, 1.0, 5.0, 2.0]),
            vec![3.5, 1.0, 3.5, 2.0]
        );
        // textbook value: d² sum = 2 over n = 5 gives 1 − 6·2/(5·24) = 0.9
        let r = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 1.0, 3.0, 4.0, 5.0]).unwrap();
        assert!((r - 0.9).abs() < 1e-12);
        assert!(spearman(&a, &a[..3]).is_err());
    }

    #[test]
    fn toy_gradcheck_and_negative_control() {
        let cfg = ModelConfig::toy();
        let ok = end_to_end_gradcheck(&cfg, 3, &GradCheckConfig::new(1e-5, 1e-3)).unwrap();
        assert!(ok.passed(), "{:?}", ok.worst());
        let flipped = GradCheckConfig {
            fault: crate::autodiff::FaultInjection::FlipActivationSign,
            ..GradCheckConfig::new(1e-5, 1e-3)
        };
        assert!(!end_to_end_gradcheck(&cfg, 3, &flipped).unwrap().passed());
    }

    #[test]
    fn off_diagonal_order() {
        let m = Array::from_rows(&[&[0.0, 1.0], &[2.0, 0.0]]);
        assert_eq!(off_diagonal(&m).unwrap(), vec![1.0, 2.0]);
        assert!(off_diagonal(&Array::zeros([2, 3])).is_err());
    }

    #[test]
    fn true_gravity_follows_routing_law() {
        let o = ScenarioOverrides::default();
        let sc = generate_scenario(42, DEFAULT_NODES, DEFAULT_DAYS, &o).unwrap();
        let ds = simulate(&sc);
        let truth = ds.true_gravity.as_ref().unwrap();
        let t = off_diagonal(truth).unwrap();
        let m = sc.masses.to_vec();
        let n = m.len();

        // origin-constrained law: realized departures spread by m_j / d^β
        let mut constrained = Array::zeros([n, n]);
        for i in 0..n {
            let out: f64 = truth.data()[i * n..(i + 1) * n].iter().sum();
            let p = routing_probabilities(&m, &ds.distances, sc.beta_true, i);
            for j in 0..n {
                constrained.data_mut()[i * n + j] = out * p[j];
            }
        }
        let r = spearman(&off_diagonal(&constrained).unwrap(), &t).unwrap();
        assert!(r > 0.9, "constrained spearman {r}");

        let classic = classic_gravity(&m, &m, &ds.distances, 1.0, 1.0, 1.0, sc.beta_true).unwrap();
        let r = spearman(&off_diagonal(&classic).unwrap(), &t).unwrap();
        assert!(r > 0.8, "classic spearman {r}");
    }

    #[test]
    fn attention_export_shapes() {
        let sc = generate_scenario(1, 4, 2, &ScenarioOverrides::default()).unwrap();
        let ds = simulate(&sc);
        let cfg = ModelConfig {
            nodes: 4,
            steps_per_day: ds.meta.steps_per_day,
            ..ModelConfig::toy()
        };
        let model = Gravityformer::new(cfg.clone(), &ds.distances).unwrap();
        let data = PreparedData::new(&ds, cfg.input_len, cfg.horizon).unwrap();
        let starts: Vec<usize> = data.windows(Split::Test).take(3).collect();
        let att = layer_attention(&model, &data, &starts, cfg.layers - 1).unwrap();
        assert_eq!(att.len(), 3);
        assert_eq!(att[0].plain.shape(), [cfg.input_len, 4, 4]);
        assert_eq!(att[2].gravity.as_ref().unwrap().shape(), [4, 4]);
        assert!(att[1]
            .gravity
            .as_ref()
            .unwrap()
            .data()
            .iter()
            .all(|&v| v > 0.0));
        assert_eq!(distance_term(&model).unwrap(), model.kernel.kernel);
        assert!(layer_attention(&model, &data, &starts, cfg.layers).is_err());
        let s = sparsity_summary(&att);
        assert!(s.gated.is_some() && (0.0..=1.0).contains(&s.plain));
    }
}
