use std::path::{Path, PathBuf};

use gravityflow::diagnostics::{distance_term, layer_attention, row_entropy, sparsity};
use gravityflow::training::{PreparedData, Split};
use gravityflow::{Array, Gravityformer};

use super::eval::EvalSplit;
use super::{check_compatible, load_checkpoint, load_dataset};
use crate::manifest::RunClock;
use crate::{ensure_dir, CliError};

pub const PLAIN_FILE: &str = "attention_plain.csv";
pub const GATED_FILE: &str = "attention_gravity.csv";
pub const GRAVITY_FILE: &str = "gravity_matrix.csv";
pub const DISTANCE_FILE: &str = "distance_term.csv";
pub const EDGE_FILE: &str = "edges.csv";
pub const STATS_FILE: &str = "stats.csv";

#[derive(clap::Args)]
pub struct Args {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Block index, starting at 1.
    #[arg(long)]
    layer: usize,
    /// Window index within the split.
    #[arg(long, default_value_t = 0)]
    sample: usize,
    #[arg(long, value_enum, default_value = "test")]
    split: EvalSplit,
    /// Input time step of the attention slice; defaults to the last one.
    #[arg(long)]
    step: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn write_dense(path: &Path, m: &Array) -> Result<(), CliError> {
    let n = m.shape()[1];
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    for row in m.data().chunks(n) {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn slice(m: &Array, step: usize) -> Array {
    let n = m.shape()[1];
    Array::new([n, n], m.data()[step * n * n..(step + 1) * n * n].to_vec()).expect("square slice")
}

pub fn run(a: Args) -> Result<u8, CliError> {
    let clock = RunClock::start();
    let panel = load_dataset(&a.data)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    check_compatible(&ck.config, &panel)?;
    let cfg = ck.config.clone();
    if a.layer == 0 || a.layer > cfg.layers {
        return Err(CliError::usage(format!(
            "--layer must be in 1..={}, got {}",
            cfg.layers, a.layer
        )));
    }
    let step = a.step.unwrap_or(cfg.input_len - 1);
    if step >= cfg.input_len {
        return Err(CliError::usage(format!(
            "--step must be below {}, got {step}",
            cfg.input_len
        )));
    }
    let data = PreparedData::with_scalers(&panel, cfg.input_len, cfg.horizon, ck.scalers)?;
    let split: Split = a.split.into();
    let windows = data.windows(split);
    let start = windows.clone().nth(a.sample).ok_or_else(|| {
        CliError::usage(format!(
            "--sample {} out of range: {} has {} windows",
            a.sample,
            split.name(),
            windows.len()
        ))
    })?;
    let model = Gravityformer::from_parts(cfg.clone(), ck.params, &panel.distances)?;
    let att = layer_attention(&model, &data, &[start], a.layer - 1)?.remove(0);

    ensure_dir(&a.out)?;
    let mut outputs = Vec::new();
    let mut stats: Vec<(&str, Array)> = Vec::new();
    let plain = slice(&att.plain, step);
    let p = a.out.join(PLAIN_FILE);
    write_dense(&p, &plain)?;
    outputs.push(p);
    stats.push(("plain_attention", plain.clone()));

    let mut edge_weights = plain;
    if let (Some(gated), Some(gravity)) = (&att.gated, &att.gravity) {
        let gated = slice(gated, step);
        let p = a.out.join(GATED_FILE);
        write_dense(&p, &gated)?;
        outputs.push(p);
        let p = a.out.join(GRAVITY_FILE);
        write_dense(&p, gravity)?;
        outputs.push(p);
        let a_d = distance_term(&model)?;
        let p = a.out.join(DISTANCE_FILE);
        write_dense(&p, &a_d)?;
        outputs.push(p);
        stats.push(("gravity_attention", gated.clone()));
        stats.push(("distance_term", a_d));
        edge_weights = gated;
    }

    let n = cfg.nodes;
    let coords = panel.meta.coords();
    let p = a.out.join(EDGE_FILE);
    let mut w = csv::Writer::from_path(&p)?;
    w.write_record(["src", "dst", "src_x", "src_y", "dst_x", "dst_y", "weight"])?;
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            w.write_record([
                panel.meta.node_info[i].id.clone(),
                panel.meta.node_info[j].id.clone(),
                coords[i].0.to_string(),
                coords[i].1.to_string(),
                coords[j].0.to_string(),
                coords[j].1.to_string(),
                edge_weights.data()[i * n + j].to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| CliError::io(&p, e))?;
    outputs.push(p);

    let p = a.out.join(STATS_FILE);
    let mut w = csv::Writer::from_path(&p)?;
    w.write_record(["matrix", "sparsity", "row_entropy"])?;
    let mut line = Vec::new();
    for (name, m) in &stats {
        let (s, h) = (sparsity(m), row_entropy(m));
        w.write_record([name.to_string(), s.to_string(), h.to_string()])?;
        line.push(format!("{name} sparsity={s:.4} entropy={h:.4}"));
    }
    w.flush().map_err(|e| CliError::io(&p, e))?;
    outputs.push(p);
    println!(
        "layer {} window {} step {step}: {}",
        a.layer,
        start,
        line.join("; ")
    );

    let mut manifest = clock.manifest("export-attention");
    manifest.config = Some(cfg.clone());
    manifest.dataset = Some(a.data.clone());
    manifest.seed = Some(cfg.seed);
    manifest.outputs = outputs;
    manifest.write(&a.out)?;
    Ok(0)
}
