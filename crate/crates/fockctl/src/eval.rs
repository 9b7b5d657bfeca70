//! `eval`: policy evaluation and plot-data emission.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use fock_core::env::write_trajectory_csv;
use fock_core::wigner::{linspace, wigner_grid};
use fock_rl::ppo::fidelity_histogram;
use fock_rl::{eval_seed, evaluate, Checkpoint, EvalOptions, EvalReport};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::output::{ensure_dir, num, write_string, write_with};

/// Fractions of the episode at which Wigner snapshots are written.
pub const WIGNER_FRACTIONS: [(usize, usize); 4] = [(0, 1), (1, 3), (2, 3), (1, 1)];
pub const HISTOGRAM_BINS: usize = 20;
pub const WIGNER_POINTS: usize = 121;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Emit {
    pub traj: bool,
    pub hist: bool,
    pub wigner: bool,
    pub avg: bool,
}

impl Emit {
    pub fn all() -> Self {
        Self {
            traj: true,
            hist: true,
            wigner: true,
            avg: true,
        }
    }

    pub fn none() -> Self {
        Self {
            traj: false,
            hist: false,
            wigner: false,
            avg: false,
        }
    }
}

impl FromStr for Emit {
    type Err = String;

    /// Comma-separated subset of `traj,hist,wigner,avg`, or `all`.
    fn from_str(s: &str) -> Result<Self, String> {
        let mut e = Emit::none();
        for item in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match item {
                "traj" => e.traj = true,
                "hist" => e.hist = true,
                "wigner" => e.wigner = true,
                "avg" => e.avg = true,
                "all" => e = Emit::all(),
                other => return Err(format!("unknown emit kind `{other}` (expected traj, hist, wigner, avg or all)")),
            }
        }
        Ok(e)
    }
}

#[derive(Clone, Debug)]
pub struct EvalRequest {
    pub n_traj: usize,
    pub deterministic: bool,
    /// Defaults to the evaluation streams of the checkpoint's training seed.
    pub seed: Option<u64>,
    pub emit: Emit,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalSummary {
    pub n_traj: usize,
    pub deterministic: bool,
    pub seed: u64,
    pub mean_final_fidelity: f64,
    pub std_final_fidelity: f64,
    pub mean_normalized_return: f64,
    pub config_hash: String,
    pub checkpoint_config_hash: String,
    pub fingerprint_match: bool,
}

/// Step indices of the Wigner snapshots for an episode of `n_max` steps.
pub fn wigner_steps(n_max: usize) -> Vec<usize> {
    WIGNER_FRACTIONS.iter().map(|&(a, b)| (n_max * a + b / 2) / b).collect()
}

/// Half-width of the Wigner grid in `x` and `p`.
pub fn wigner_extent(n: usize) -> f64 {
    ((2.0 * n as f64).sqrt() + 1.0).ceil().max(4.0)
}

/// Runs the evaluation and writes the requested files plus `summary.json`
/// into `out`.
pub fn eval(ckpt: &Checkpoint, cfg: &RunConfig, req: &EvalRequest, out: &Path) -> Result<(EvalReport, EvalSummary)> {
    let env_cfg = cfg.env_config()?;
    let hash = cfg.fingerprint();
    let matches = hash == ckpt.config_hash;
    if !matches {
        log::warn!("config fingerprint {hash} differs from the checkpoint's {}", ckpt.config_hash);
        eprintln!("warning: config fingerprint does not match the checkpoint");
    }
    let policy = ckpt.policy()?;
    if policy.net.input_dim() != env_cfg.observation_dim() || policy.net.output_dim() != env_cfg.action_dim() {
        return Err(CliError::Config(format!(
            "checkpoint network {:?} does not fit env (observation {}, action {})",
            policy.net.sizes(),
            env_cfg.observation_dim(),
            env_cfg.action_dim()
        )));
    }
    let seed = req.seed.unwrap_or_else(|| eval_seed(ckpt.seed));
    let steps = wigner_steps(env_cfg.n_max);
    let opts = EvalOptions {
        n_traj: req.n_traj,
        deterministic: req.deterministic,
        seed,
        keep_trajectories: if req.emit.traj { req.n_traj } else { 0 },
        snapshot_steps: if req.emit.wigner { steps.clone() } else { Vec::new() },
    };
    let rep = evaluate(&policy, &env_cfg, &opts)?;
    ensure_dir(out)?;

    let (m, n) = (env_cfg.channels.m, env_cfg.n);
    for (i, rows) in rep.trajectories.iter().enumerate() {
        write_with(&out.join(format!("traj_{i:04}.csv")), |w| write_trajectory_csv(w, rows, m, n))?;
    }
    if req.emit.hist {
        write_with(&out.join("final_fidelities.csv"), |w| {
            writeln!(w, "trajectory,final_fidelity,normalized_return")?;
            for (i, (f, r)) in rep.final_fidelities.iter().zip(&rep.normalized_returns).enumerate() {
                writeln!(w, "{i},{},{}", num(*f), num(*r))?;
            }
            Ok(())
        })?;
        write_with(&out.join("fidelity_histogram.csv"), |w| {
            writeln!(w, "bin_lo,bin_hi,count")?;
            for (lo, hi, c) in fidelity_histogram(&rep.final_fidelities, HISTOGRAM_BINS) {
                writeln!(w, "{lo},{hi},{c}")?;
            }
            Ok(())
        })?;
    }
    if req.emit.avg && !rep.mean_populations.is_empty() {
        let dt = env_cfg.dt();
        write_with(&out.join("mean_populations.csv"), |w| {
            let cols: Vec<String> = (0..n).map(|k| format!("p_{k}")).collect();
            writeln!(w, "step,t,{}", cols.join(","))?;
            for (s, p) in rep.mean_populations.iter().enumerate() {
                let vals: Vec<String> = p.iter().map(|v| num(*v)).collect();
                writeln!(w, "{s},{},{}", num(s as f64 * dt), vals.join(","))?;
            }
            Ok(())
        })?;
    }
    if req.emit.wigner {
        let ext = wigner_extent(n);
        let axis = linspace(-ext, ext, WIGNER_POINTS);
        for (&(a, b), step) in WIGNER_FRACTIONS.iter().zip(&steps) {
            let Some((_, rho)) = rep.mean_states.iter().find(|(s, _)| s == step) else {
                continue;
            };
            let field = wigner_grid(rho, &axis, &axis);
            let name = if a == 0 || a == b { format!("wigner_t{a}.csv") } else { format!("wigner_t{a}-{b}.csv") };
            write_with(&out.join(name), |w| field.write_csv(w))?;
        }
    }
    let k = rep.normalized_returns.len().max(1) as f64;
    let summary = EvalSummary {
        n_traj: req.n_traj,
        deterministic: req.deterministic,
        seed,
        mean_final_fidelity: rep.mean_final_fidelity,
        std_final_fidelity: rep.std_final_fidelity,
        mean_normalized_return: rep.normalized_returns.iter().sum::<f64>() / k,
        config_hash: hash,
        checkpoint_config_hash: ckpt.config_hash.clone(),
        fingerprint_match: matches,
    };
    write_string(&out.join("summary.json"), &serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    Ok((rep, summary))
}
