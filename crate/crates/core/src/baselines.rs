//! Analytic comparison strategies: iterated displacement plus projective
//! photon counting, and one-step greedy displacement search.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use rand::Rng;

use crate::env::{ControlAction, EpisodeResult, Environment};
use crate::error::{Error, Result};
use crate::fock::displacement_element;
use crate::sme::SmeEngine;
use crate::state::{fidelity, DensityMatrix, TargetSpec};

/// `|<l| D(alpha)^dagger |n>|^2` for real `alpha`, equal to
/// `|<n| D(alpha) |l>|^2`.
pub fn displaced_overlap(n: usize, l: usize, alpha: f64) -> f64 {
    displacement_element(n, l, C64::new(alpha, 0.0)).norm_sqr().min(1.0)
}

/// Best real displacement for every `(n, l)` transition.
#[derive(Clone, Debug)]
pub struct AlphaTable {
    size: usize,
    alpha: Vec<f64>,
    overlap: Vec<f64>,
}

impl AlphaTable {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn alpha(&self, n: usize, l: usize) -> f64 {
        self.alpha[n * self.size + l]
    }

    pub fn overlap(&self, n: usize, l: usize) -> f64 {
        self.overlap[n * self.size + l]
    }
}

const GRID_SEEDS: usize = 400;
const GOLDEN_TOL: f64 = 1e-10;

/// Golden-section refinement of a unimodal bracket `[lo, hi]`.
fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - r * (hi - lo);
    let mut x2 = lo + r * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > GOLDEN_TOL {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + r * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - r * (hi - lo);
            f1 = f(x1);
        }
    }
    let x = 0.5 * (lo + hi);
    (x, f(x))
}

/// Maximizes `displaced_overlap(n, l, .)` on `[0, 2 sqrt(size)]` for all
/// pairs by grid seeding followed by golden-section search.
pub fn build_alpha_table(size: usize) -> Result<AlphaTable> {
    if size < 2 {
        return Err(Error::CutoffTooSmall(size));
    }
    let hi = 2.0 * (size as f64).sqrt();
    let step = hi / GRID_SEEDS as f64;
    let mut alpha = vec![0.0; size * size];
    let mut overlap = vec![0.0; size * size];
    for n in 0..size {
        for l in n..size {
            let (a, o) = if n == l {
                (0.0, 1.0)
            } else {
                let f = |x: f64| displaced_overlap(n, l, x);
                let best = (0..=GRID_SEEDS)
                    .map(|k| k as f64 * step)
                    .map(|x| (x, f(x)))
                    .fold((0.0, f64::NEG_INFINITY), |acc, v| if v.1 > acc.1 { v } else { acc });
                let (x, v) = golden_max(f, (best.0 - step).max(0.0), (best.0 + step).min(hi));
                if v >= best.1 {
                    (x, v)
                } else {
                    best
                }
            };
            alpha[n * size + l] = a;
            alpha[l * size + n] = a;
            overlap[n * size + l] = o;
            overlap[l * size + n] = o;
        }
    }
    Ok(AlphaTable { size, alpha, overlap })
}

#[derive(Clone, Debug)]
pub struct StrongConfig {
    pub cutoff: usize,
    pub max_iters: usize,
}

impl Default for StrongConfig {
    fn default() -> Self {
        Self {
            cutoff: 70,
            max_iters: 50,
        }
    }
}

/// Outcome distribution of displacing `|n>` by `alpha_optim(n, l)` and
/// counting photons; the last entry is the mass at or above the cutoff.
pub fn strong_transition_row(table: &AlphaTable, n: usize, l: usize, cutoff: usize) -> Vec<f64> {
    let alpha = table.alpha(n, l);
    let mut row: Vec<f64> = (0..cutoff).map(|m| displaced_overlap(m, n, alpha)).collect();
    let kept: f64 = row.iter().sum();
    row.push((1.0 - kept).max(0.0));
    row
}

/// Precomputed Born-rule outcome tables for one target.
#[derive(Clone, Debug)]
pub struct StrongChain {
    pub target: usize,
    pub cutoff: usize,
    /// `rows[n][m]`; index `cutoff` collects leakage.
    pub rows: Vec<Vec<f64>>,
}

impl StrongChain {
    pub fn new(table: &AlphaTable, target: usize, cutoff: usize) -> Result<Self> {
        if target >= cutoff {
            return Err(Error::InvalidTarget(format!("target {target} not below cutoff {cutoff}")));
        }
        if table.size() < cutoff {
            return Err(Error::InvalidConfig(format!(
                "alpha table of size {} cannot serve cutoff {cutoff}",
                table.size()
            )));
        }
        let rows = (0..cutoff).map(|n| strong_transition_row(table, n, target, cutoff)).collect();
        Ok(Self { target, cutoff, rows })
    }

    /// Probability of reaching the target with an unlimited iteration budget,
    /// from a direct linear solve of the absorbing chain started in `|0>`.
    pub fn absorption_probability(&self) -> f64 {
        if self.target == 0 {
            return 1.0;
        }
        let c = self.cutoff;
        // transient states: every level except the target
        let idx: Vec<usize> = (0..c).filter(|&n| n != self.target).collect();
        let k = idx.len();
        let mut a = DMatrix::<f64>::identity(k, k);
        let mut b = DVector::<f64>::zeros(k);
        for (i, &n) in idx.iter().enumerate() {
            for (j, &m) in idx.iter().enumerate() {
                a[(i, j)] -= self.rows[n][m];
            }
            b[i] = self.rows[n][self.target];
        }
        let x = a.lu().solve(&b).expect("absorbing chain is non-singular");
        x[0]
    }

    /// Exact probability of first success at each iteration `1..=max_iters`
    /// (index 0 is success without any iteration).
    pub fn success_profile(&self, max_iters: usize) -> Vec<f64> {
        let mut out = vec![0.0; max_iters + 1];
        if self.target == 0 {
            out[0] = 1.0;
            return out;
        }
        let mut dist = vec![0.0; self.cutoff];
        dist[0] = 1.0;
        for slot in out.iter_mut().skip(1) {
            let mut next = vec![0.0; self.cutoff];
            for (n, &p) in dist.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                for (m, &q) in self.rows[n][..self.cutoff].iter().enumerate() {
                    next[m] += p * q;
                }
            }
            *slot = next[self.target];
            next[self.target] = 0.0;
            dist = next;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StrongRun {
    pub success: bool,
    pub iterations: usize,
    pub final_level: Option<usize>,
}

/// One Monte-Carlo run starting from `|0>`; `final_level` is `None` after
/// leaking past the cutoff.
pub fn strong_measure_run<R: Rng + ?Sized>(chain: &StrongChain, max_iters: usize, rng: &mut R) -> StrongRun {
    let mut n = 0;
    if n == chain.target {
        return StrongRun {
            success: true,
            iterations: 0,
            final_level: Some(0),
        };
    }
    for it in 1..=max_iters {
        let u: f64 = rng.gen();
        let row = &chain.rows[n];
        let mut acc = 0.0;
        let mut outcome = None;
        for (m, &p) in row[..chain.cutoff].iter().enumerate() {
            acc += p;
            if u < acc {
                outcome = Some(m);
                break;
            }
        }
        match outcome {
            None => {
                return StrongRun {
                    success: false,
                    iterations: it,
                    final_level: None,
                }
            }
            Some(m) if m == chain.target => {
                return StrongRun {
                    success: true,
                    iterations: it,
                    final_level: Some(m),
                }
            }
            Some(m) => n = m,
        }
    }
    StrongRun {
        success: false,
        iterations: max_iters,
        final_level: Some(n),
    }
}

/// Candidate drives for the greedy search: an `n_re x n_im` lattice over
/// `[-beta_max, beta_max]^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct GreedyConfig {
    pub n_re: usize,
    pub n_im: usize,
    pub beta_max: f64,
}

impl GreedyConfig {
    pub fn new(beta_max: f64) -> Self {
        Self {
            n_re: 21,
            n_im: 21,
            beta_max,
        }
    }

    pub fn grid(&self) -> Vec<C64> {
        let axis = |k: usize, len: usize| {
            if len == 1 {
                0.0
            } else {
                -self.beta_max + 2.0 * self.beta_max * k as f64 / (len - 1) as f64
            }
        };
        let mut out = Vec::with_capacity(self.n_re * self.n_im);
        for i in 0..self.n_re {
            for j in 0..self.n_im {
                out.push(C64::new(axis(i, self.n_re), axis(j, self.n_im)));
            }
        }
        out
    }
}

/// Fidelities closer than this count as ties.
pub const GREEDY_TIE_TOL: f64 = 1e-12;

/// Picks the drive whose noise-free one-step evolution has the highest
/// fidelity with `target`; ties go to the smallest `|beta|`, then to the
/// smallest `(Re, Im)`.
pub fn greedy_step(engine: &SmeEngine, rho: &DensityMatrix, target: &TargetSpec, gates: &[bool], grid: &[C64]) -> C64 {
    let scored: Vec<(C64, f64)> = grid
        .iter()
        .map(|&b| (b, fidelity(&engine.drift_step(rho, b, gates), target)))
        .collect();
    let best = scored.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    scored
        .into_iter()
        .filter(|s| s.1 >= best - GREEDY_TIE_TOL)
        .map(|s| s.0)
        .min_by(|a, b| {
            a.norm()
                .total_cmp(&b.norm())
                .then(a.re.total_cmp(&b.re))
                .then(a.im.total_cmp(&b.im))
        })
        .unwrap_or(C64::new(0.0, 0.0))
}

/// Runs one greedy episode with all monitored channels on, replanning on the
/// realized state each step.
pub fn run_greedy_episode(env: &mut Environment, cfg: &GreedyConfig) -> Result<EpisodeResult> {
    let grid = cfg.grid();
    let target = env.config().target.clone();
    let gates = vec![true; env.config().channels.m];
    env.reset();
    let mut out = EpisodeResult::default();
    loop {
        let beta = greedy_step(env.engine(), env.state(), &target, &gates, &grid);
        let o = env.step_action(ControlAction {
            beta,
            gates: gates.clone(),
        })?;
        out.rewards.push(o.reward);
        out.final_fidelity = o.fidelity;
        if o.done {
            return Ok(out);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineRow {
    pub target: String,
    pub strategy: String,
    pub run: usize,
    pub success: bool,
    pub iterations: usize,
    pub final_fidelity: f64,
}

pub const BASELINE_HEADER: &str = "target,strategy,run,success,iterations,final_fidelity";

pub fn write_baseline_csv<W: Write>(mut w: W, rows: &[BaselineRow]) -> io::Result<()> {
    writeln!(w, "{BASELINE_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.target, r.strategy, r.run, r.success as u8, r.iterations, r.final_fidelity
        )?;
    }
    Ok(())
}
