use super::*;
use crate::autodiff::{Gradients, ParamStore, Tape};
use crate::config::ModelConfig;
use crate::data::synthetic::{generate_scenario, simulate, ScenarioOverrides};
use crate::data::PanelDataset;
use crate::error::Error;
use crate::tensor::Array;

fn panel(nodes: usize, days: usize, seed: u64) -> PanelDataset {
    let sc = generate_scenario(seed, nodes, days, &ScenarioOverrides::default()).unwrap();
    simulate(&sc)
}

fn with_steps(mut ds: PanelDataset, steps: usize) -> PanelDataset {
    let n = ds.nodes();
    let cut = |a: &Array| Array::new([steps, n], a.data()[..steps * n].to_vec()).unwrap();
    ds.activity = cut(&ds.activity);
    ds.inflow = cut(&ds.inflow);
    ds.outflow = cut(&ds.outflow);
    ds.meta.steps = steps;
    ds
}

#[test]
fn window_examples() {
    let ds = with_steps(panel(3, 1, 1), 20);
    let w = make_windows(&ds, 12, 4).unwrap();
    assert_eq!(w.len(), 5);
    assert_eq!(w[0].y.data()[0], ds.activity.data()[12 * 3]);
    let last = w.last().unwrap();
    assert_eq!(last.start + 12 + 4, 20);
    assert!(matches!(window_count(15, 12, 4), Err(Error::Range(_))));
}

#[test]
fn split_is_chronological_and_deterministic() {
    let s = WindowSplit::chronological(1329).unwrap();
    assert_eq!(s, WindowSplit::chronological(1329).unwrap());
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (930, 132, 267));
    assert_eq!(s.train.end, s.val.start);
    assert_eq!(s.val.end, s.test.start);
    let s = WindowSplit::chronological(10).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
}

#[test]
fn scaler_ignores_test_split() {
    let ds = panel(4, 3, 2);
    let a = PreparedData::new(&ds, 12, 4).unwrap();
    let mut touched = ds.clone();
    let n = ds.nodes();
    let test_start = a.windows(Split::Test).start + 12;
    assert!(a.train_steps().end <= test_start);
    for v in &mut touched.activity.data_mut()[test_start * n..] {
        *v += 1000.0;
    }
    for v in &mut touched.inflow.data_mut()[test_start * n..] {
        *v *= 3.0;
    }
    let b = PreparedData::new(&touched, 12, 4).unwrap();
    assert_eq!(a.scalers, b.scalers);
}

fn grads(store: &ParamStore, g: f64) -> Gradients {
    let mut tape = Tape::new();
    let mut terms = Vec::new();
    for (name, _) in store.iter() {
        let p = tape.param(store, name).unwrap();
        let s = tape.sum_all(p);
        terms.push(tape.scale(s, g));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t).unwrap();
    }
    tape.backward(total, store).unwrap()
}

fn store(values: &[f64]) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("w", Array::from_vec(values.to_vec())).unwrap();
    s
}

#[test]
fn adam_examples() {
    let no_wd = AdamConfig {
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    let mut p = store(&[1.0, -2.0]);
    let mut st = AdamState::new(&p, no_wd);
    {
        let g = grads(&p, 0.0);
        st.step(&mut p, &g)
    }
    .unwrap();
    assert_eq!(p.get("w").unwrap().data(), &[1.0, -2.0]);

    let mut p = store(&[0.5]);
    let mut st = AdamState::new(&p, no_wd);
    {
        let g = grads(&p, 1.0);
        st.step(&mut p, &g)
    }
    .unwrap();
    let delta = p.get("w").unwrap().data()[0] - 0.5;
    assert!((delta + 0.002).abs() < 1e-10, "{delta}");
    assert_eq!(st.steps_taken(), 1);

    let mut p = store(&[3.0]);
    let mut st = AdamState::new(&p, AdamConfig::default());
    {
        let g = grads(&p, 0.0);
        st.step(&mut p, &g)
    }
    .unwrap();
    assert_eq!(p.get("w").unwrap().data()[0], 3.0 * (1.0 - 1e-6));

    let mut p = store(&[0.7, 0.1]);
    let frozen = AdamConfig {
        lr: 0.0,
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    let mut st = AdamState::new(&p, frozen);
    for g in [3.0, -1e3, 0.25] {
        {
            let g = grads(&p, g);
            st.step(&mut p, &g)
        }
        .unwrap();
    }
    assert_eq!(p.get("w").unwrap().data(), &[0.7, 0.1]);
}

#[test]
fn adam_rejects_non_finite_gradient() {
    let mut p = store(&[1.0]);
    let mut st = AdamState::new(&p, AdamConfig::default());
    let err = {
        let g = grads(&p, f64::NAN);
        st.step(&mut p, &g)
    }
    .unwrap_err();
    assert!(err.to_string().contains("`w`"), "{err}");
}

#[test]
fn metric_examples() {
    let m = metrics(&[4.0, 7.0], &[4.0, 7.0]).unwrap();
    assert_eq!((m.rmse, m.mae, m.mape), (0.0, 0.0, Some(0.0)));
    let m = metrics(&[10.0], &[12.0]).unwrap();
    assert_eq!((m.rmse, m.mae), (2.0, 2.0));
    assert!((m.mape.unwrap() - 20.0).abs() < 1e-12);
    let m = metrics(&[0.0, 10.0], &[1.0, 11.0]).unwrap();
    assert!((m.mape.unwrap() - 10.0).abs() < 1e-12);
    assert_eq!(m.mape_excluded, 1);
    let m = metrics(&[0.0, 0.5], &[1.0, 1.0]).unwrap();
    assert_eq!(m.mape, None);
    assert_eq!(m.mape_excluded, 2);
    assert!(metrics(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn metric_symmetry() {
    let a = [3.0, 8.5, 0.0, 12.0, 40.0];
    let b = [2.0, 9.0, 1.5, 15.0, 33.0];
    let (x, y) = (metrics(&a, &b).unwrap(), metrics(&b, &a).unwrap());
    assert_eq!(x.mae, y.mae);
    assert_eq!(x.rmse, y.rmse);
}

#[test]
fn report_breakdowns() {
    let y = Array::new([1, 2, 2, 1], vec![10.0, 20.0, 30.0, 40.0]).unwrap();
    let h = Array::new([1, 2, 2, 1], vec![11.0, 20.0, 30.0, 44.0]).unwrap();
    let r = evaluate(&y, &h).unwrap();
    assert_eq!(r.per_horizon[0].mae, 0.5);
    assert_eq!(r.per_horizon[1].mae, 2.0);
    assert_eq!(r.per_node[0].mae, 0.5);
    assert_eq!(r.per_node[1].mae, 2.0);
    assert_eq!(r.overall.mae, 1.25);
}

#[test]
fn ha_constant_and_periodic() {
    let mut ds = panel(3, 14, 3);
    for v in ds.activity.data_mut() {
        *v = 17.0;
    }
    let data = PreparedData::new(&ds, 12, 4).unwrap();
    let ha = HistoricalAverage::fit(&ds, data.train_steps()).unwrap();
    let starts: Vec<usize> = data.windows(Split::Test).collect();
    let pred = ha.predict_windows(&ds.meta, &starts, 12, 4);
    let m = evaluate(&window_targets(&ds, &starts, 12, 4), &pred).unwrap();
    assert_eq!(m.overall.rmse, 0.0);

    let d = ds.meta.steps_per_day;
    let n = ds.nodes();
    for t in 0..ds.steps() {
        for node in 0..n {
            ds.activity.data_mut()[t * n + node] =
                ((t % d) as f64 * 0.7 + node as f64).sin() * 10.0 + 30.0;
        }
    }
    let ha = HistoricalAverage::fit(&ds, data.train_steps()).unwrap();
    let pred = ha.predict_windows(&ds.meta, &starts, 12, 4);
    let m = evaluate(&window_targets(&ds, &starts, 12, 4), &pred).unwrap();
    assert!(m.overall.rmse < 1e-12, "{}", m.overall.rmse);
}

fn tiny_config(ds: &PanelDataset) -> ModelConfig {
    ModelConfig {
        nodes: ds.nodes(),
        steps_per_day: ds.meta.steps_per_day,
        ..ModelConfig::toy()
    }
}

#[test]
fn zero_epochs_returns_initial_model() {
    let ds = panel(4, 2, 4);
    let cfg = tiny_config(&ds);
    let opts = TrainOptions {
        epochs: 0,
        ..TrainOptions::default()
    };
    let out = train(&cfg, &ds, &opts).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(
        out.checkpoint.params,
        crate::model::init_params(&cfg).unwrap()
    );
    assert_eq!(out.checkpoint.best_epoch, None);
}

#[test]
fn mismatched_nodes_rejected() {
    let ds = panel(4, 2, 4);
    let cfg = ModelConfig {
        nodes: 5,
        ..tiny_config(&ds)
    };
    assert!(matches!(
        train(&cfg, &ds, &TrainOptions::default()),
        Err(Error::Config(_))
    ));
}

#[test]
fn training_is_deterministic_and_keeps_best_epoch() {
    let ds = panel(4, 3, 5);
    let cfg = tiny_config(&ds);
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions {
        epochs: 3,
        seed: 9,
        log_path: Some(dir.path().join("log.csv")),
        ..TrainOptions::default()
    };
    let a = train(&cfg, &ds, &opts).unwrap();
    let b = train(&cfg, &ds, &opts).unwrap();
    let strip = |h: &[EpochRecord]| {
        h.iter()
            .map(|r| (r.epoch, r.train, r.val))
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&a.history), strip(&b.history));
    assert_eq!(a.checkpoint.params, b.checkpoint.params);

    let best = a
        .history
        .iter()
        .min_by(|x, y| x.val.rmse.total_cmp(&y.val.rmse))
        .unwrap();
    assert_eq!(a.checkpoint.best_epoch, Some(best.epoch));
    assert_eq!(a.checkpoint.best_val_rmse, Some(best.val.rmse));

    let data = PreparedData::new(&ds, cfg.input_len, cfg.horizon).unwrap();
    let model = crate::model::Gravityformer::from_parts(
        cfg.clone(),
        a.checkpoint.params.clone(),
        &ds.distances,
    )
    .unwrap();
    let (val, _) = evaluate_split(&model, &data, Split::Val, 1).unwrap();
    assert_eq!(val.overall.rmse, best.val.rmse);
    let (val2, _) = evaluate_split(&model, &data, Split::Val, 3).unwrap();
    assert_eq!(val2.overall.rmse, best.val.rmse);

    let log = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,split,rmse,mae,mape,seconds");
    assert_eq!(lines.len(), 1 + 2 * 3);
    assert!(lines[1].starts_with("1,train,") && lines[2].starts_with("1,val,"));
}
