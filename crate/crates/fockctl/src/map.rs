//! `map`: deterministic policy response over the pure states
//! `x|1> + sqrt(1 - x^2 - y^2)|2> + y|3>`.

use std::io::{self, Write};

use fock_core::env::{encode_observation, EnvConfig};
use fock_core::wigner::linspace;
use fock_core::DensityMatrix;
use fock_rl::GaussianPolicy;
use num_complex::Complex64 as C64;

use crate::error::{CliError, Result};
use crate::output::num;

#[derive(Clone, Debug, PartialEq)]
pub struct MapPoint {
    pub x: f64,
    pub y: f64,
    /// `None` outside the unit disk.
    pub output: Option<MapOutput>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapOutput {
    pub beta: C64,
    /// Raw gate outputs; empty without gate control.
    pub gate_logits: Vec<f64>,
}

/// Density matrix of the map state at `(x, y)`, or `None` when
/// `x^2 + y^2 > 1`.
pub fn map_state(x: f64, y: f64, dim: usize) -> Result<Option<DensityMatrix>> {
    let r2 = x * x + y * y;
    if r2 > 1.0 {
        return Ok(None);
    }
    if dim < 4 {
        return Err(CliError::Config(format!("policy map needs a cutoff of at least 4, got {dim}")));
    }
    let mut psi = vec![C64::new(0.0, 0.0); dim];
    psi[1] = C64::new(x, 0.0);
    psi[2] = C64::new((1.0 - r2).max(0.0).sqrt(), 0.0);
    psi[3] = C64::new(y, 0.0);
    Ok(Some(DensityMatrix::pure(&psi)?))
}

/// Averaged deterministic outputs of `policies` at one state; drives are
/// clamped and scaled like environment actions before averaging.
pub fn policy_response(policies: &[GaussianPolicy], env: &EnvConfig, rho: &DensityMatrix) -> Result<MapOutput> {
    let obs = encode_observation(rho);
    let k = policies.len() as f64;
    let mut beta = C64::new(0.0, 0.0);
    let mut gates = vec![0.0; env.action_dim() - 2];
    for p in policies {
        let raw = p.mean(&obs)?;
        beta += env.decode_action(&raw)?.beta;
        gates.iter_mut().zip(&raw[2..]).for_each(|(g, r)| *g += r);
    }
    Ok(MapOutput {
        beta: beta / k,
        gate_logits: gates.into_iter().map(|g| g / k).collect(),
    })
}

/// Evaluates a `grid x grid` lattice over `[-1, 1]^2`.
pub fn policy_map(policies: &[GaussianPolicy], env: &EnvConfig, grid: usize) -> Result<Vec<MapPoint>> {
    if policies.is_empty() {
        return Err(CliError::Config("policy map needs at least one checkpoint".into()));
    }
    for p in policies {
        if p.net.input_dim() != env.observation_dim() || p.net.output_dim() != env.action_dim() {
            return Err(CliError::Config(format!("checkpoint network {:?} does not fit the configured environment", p.net.sizes())));
        }
    }
    let axis = linspace(-1.0, 1.0, grid);
    let mut out = Vec::with_capacity(grid * grid);
    for &x in &axis {
        for &y in &axis {
            let output = match map_state(x, y, env.n)? {
                Some(rho) => Some(policy_response(policies, env, &rho)?),
                None => None,
            };
            out.push(MapPoint { x, y, output });
        }
    }
    Ok(out)
}

pub fn write_map_csv<W: Write>(mut w: W, points: &[MapPoint], n_gates: usize) -> io::Result<()> {
    let gates: String = (0..n_gates).map(|k| format!(",gate_{k}")).collect();
    writeln!(w, "x,y,valid,re_beta,im_beta,abs_beta{gates}")?;
    for p in points {
        match &p.output {
            Some(o) => {
                let g: String = o.gate_logits.iter().map(|v| format!(",{}", num(*v))).collect();
                writeln!(w, "{},{},1,{},{},{}{g}", p.x, p.y, num(o.beta.re), num(o.beta.im), num(o.beta.norm()))?;
            }
            None => {
                writeln!(w, "{},{},0,,,{}", p.x, p.y, ",".repeat(n_gates))?;
            }
        }
    }
    Ok(())
}
