//! `sweep`: fresh training and evaluation over a grid of up to two config
//! parameters.

use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baseline::{run_greedy, target_label};
use crate::config::{set_path, RunConfig};
use crate::error::{CliError, Result};
use crate::eval::{eval, Emit, EvalRequest};
use crate::output::num;
use crate::train::train;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    /// Dotted config path, e.g. `channels.gamma_meas`.
    pub path: String,
    pub values: Vec<Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axes: Vec<Axis>,
    pub seeds: Vec<u64>,
    /// Also run the greedy baseline in every cell.
    #[serde(default)]
    pub greedy: bool,
}

impl SweepSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        let spec: SweepSpec = serde_path_to_error::deserialize(&mut de)
            .map_err(|e| CliError::Config(format!("sweep spec: {}: {}", e.path(), e.inner())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() || self.axes.len() > 2 {
            return Err(CliError::Config(format!("sweep spec: axes: expected 1 or 2 axes, got {}", self.axes.len())));
        }
        if let Some(i) = self.axes.iter().position(|a| a.values.is_empty()) {
            return Err(CliError::Config(format!("sweep spec: axes[{i}].values: empty")));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Config("sweep spec: seeds: empty".into()));
        }
        Ok(())
    }

    /// Cells in row-major order, each with one value per axis.
    pub fn cells(&self) -> Vec<Vec<Value>> {
        let mut cells = vec![Vec::new()];
        for axis in &self.axes {
            cells = cells
                .into_iter()
                .flat_map(|c| {
                    axis.values.iter().map(move |v| {
                        let mut c = c.clone();
                        c.push(v.clone());
                        c
                    })
                })
                .collect();
        }
        cells
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub axis1: String,
    pub axis2: String,
    pub seed: u64,
    pub mean_final_fidelity: f64,
    pub std_final_fidelity: f64,
    pub strategy: String,
}

pub const SWEEP_HEADER: &str = "axis1,axis2,seed,mean_final_fidelity,std_final_fidelity,strategy";

fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Base config with the cell's axis values and seed applied.
pub fn cell_config(base: &RunConfig, spec: &SweepSpec, cell: &[Value], seed: u64) -> Result<RunConfig> {
    let mut doc = serde_json::to_value(base).expect("config serializes");
    for (axis, v) in spec.axes.iter().zip(cell) {
        set_path(&mut doc, &axis.path, v.clone())?;
    }
    set_path(&mut doc, "seed", Value::from(seed))?;
    let cfg: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| CliError::Config(format!("{}: {}", e.path(), e.inner())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn run_cell(base: &RunConfig, spec: &SweepSpec, cell: &[Value], seed: u64, dir: &Path) -> Result<Vec<(f64, f64, &'static str)>> {
    let cfg = cell_config(base, spec, cell, seed)?;
    let out = train(&cfg, dir)?;
    let ckpt = fock_rl::Checkpoint::from_trainer(&out.trainer, &cfg.fingerprint());
    let req = EvalRequest {
        n_traj: cfg.ppo.eval_trajectories,
        deterministic: true,
        seed: None,
        emit: Emit {
            hist: true,
            ..Emit::none()
        },
    };
    let (rep, _) = eval(&ckpt, &cfg, &req, &dir.join("eval"))?;
    let mut res = vec![(rep.mean_final_fidelity, rep.std_final_fidelity, "rl")];
    if spec.greedy {
        let env = cfg.env_config()?;
        let (_, g) = run_greedy(&env, cfg.baseline.greedy_grid, cfg.baseline.greedy_runs, seed, &target_label(&cfg.env.target))?;
        res.push((g.mean_final_fidelity, g.std_final_fidelity, "greedy"));
    }
    Ok(res)
}

/// Trains and evaluates every cell and seed; each job owns
/// `dir/cell<k>-seed<s>`. Failed cells yield NaN rows.
pub fn sweep(base: &RunConfig, spec: &SweepSpec, dir: &Path) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    crate::output::ensure_dir(dir)?;
    let jobs: Vec<(usize, Vec<Value>, u64)> = spec
        .cells()
        .into_iter()
        .enumerate()
        .flat_map(|(k, c)| spec.seeds.iter().map(move |&s| (k, c.clone(), s)))
        .collect();
    let results: Vec<Vec<SweepRow>> = jobs
        .par_iter()
        .map(|(k, cell, seed)| {
            let cell_dir: PathBuf = dir.join(format!("cell{k}-seed{seed}"));
            let labels: Vec<String> = cell.iter().map(value_label).collect();
            let row = |m: f64, s: f64, strategy: &str| SweepRow {
                axis1: labels[0].clone(),
                axis2: labels.get(1).cloned().unwrap_or_default(),
                seed: *seed,
                mean_final_fidelity: m,
                std_final_fidelity: s,
                strategy: strategy.to_string(),
            };
            match run_cell(base, spec, cell, *seed, &cell_dir) {
                Ok(res) => res.into_iter().map(|(m, s, st)| row(m, s, st)).collect(),
                Err(e) => {
                    log::error!("sweep cell {k} seed {seed} failed: {e}");
                    eprintln!("warning: sweep cell {k} seed {seed} failed: {e}");
                    let mut rows = vec![row(f64::NAN, f64::NAN, "rl")];
                    if spec.greedy {
                        rows.push(row(f64::NAN, f64::NAN, "greedy"));
                    }
                    rows
                }
            }
        })
        .collect();
    Ok(results.into_iter().flatten().collect())
}

pub fn write_sweep_csv<W: Write>(mut w: W, rows: &[SweepRow]) -> io::Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.axis1,
            r.axis2,
            r.seed,
            num(r.mean_final_fidelity),
            num(r.std_final_fidelity),
            r.strategy
        )?;
    }
    Ok(())
}
