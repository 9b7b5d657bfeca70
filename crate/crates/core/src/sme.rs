//! Itô stochastic master equation for a cavity under multichannel
//! photon-number-resolved homodyne monitoring, a linear drive, decay and
//! dephasing.
//!
//! Each monitored channel `n` watches the projector `P_n` at rate
//! `Gamma = gamma_meas / 2` with detection efficiency `eta`:
//!
//! ```text
//! d rho = -i[H, rho] dt + sum_n Gamma D[P_n] rho dt + sqrt(eta Gamma) H[P_n] rho dW_n
//!         + gamma_decay D[a] rho dt + (gamma_dephasing / 2) sum_n D[P_n] rho dt
//! H = i (beta a^dagger - beta^* a)
//! ```

use num_complex::Complex64 as C64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::ControlAction;
use crate::error::{Error, Result};
use crate::fock::annihilation_op;
use crate::matrix::ComplexMatrix;
use crate::state::{passes_positivity, DensityMatrix, POSITIVITY_TOL};

/// How the measurement-induced dephasing and the stochastic back-action are
/// balanced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EfficiencyMode {
    /// Deterministic `(gamma/2) D[P]`, stochastic `sqrt(gamma/2) H[P]`: unit
    /// efficiency, pure states stay pure.
    #[default]
    PurityPreserving,
    /// Deterministic `(gamma/2) D[P]`, stochastic `(sqrt(gamma)/2) H[P]`:
    /// equivalent to detection efficiency 1/2.
    HalfEfficiency,
}

impl EfficiencyMode {
    pub fn efficiency(self) -> f64 {
        match self {
            EfficiencyMode::PurityPreserving => 1.0,
            EfficiencyMode::HalfEfficiency => 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    /// Number of monitored channels; channel `n` measures `P_n`.
    pub m: usize,
    pub gamma_meas: f64,
    #[serde(default)]
    pub efficiency_mode: EfficiencyMode,
}

impl ChannelConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.m > dim {
            return Err(Error::InvalidConfig(format!("channels.m = {} exceeds cutoff {dim}", self.m)));
        }
        if !(self.gamma_meas >= 0.0) || !self.gamma_meas.is_finite() {
            return Err(Error::InvalidConfig("channels.gamma_meas must be >= 0".into()));
        }
        Ok(())
    }

    /// Lindblad rate of each channel.
    pub fn rate(&self) -> f64 {
        0.5 * self.gamma_meas
    }

    /// Prefactor of `H[P_n] dW_n`.
    pub fn stochastic_coefficient(&self) -> f64 {
        (self.efficiency_mode.efficiency() * self.rate()).sqrt()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default)]
    pub gamma_decay: f64,
    #[serde(default)]
    pub gamma_dephasing: f64,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("noise.gamma_decay", self.gamma_decay), ("noise.gamma_dephasing", self.gamma_dephasing)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Normalized Kraus map, first order in `dt`; keeps the state positive.
    #[default]
    Kraus,
    EulerMaruyama,
    /// Predictor-corrector on the Stratonovich-corrected drift; converges to
    /// the Itô solution.
    StochasticHeun,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    #[serde(default = "default_n_sub")]
    pub n_sub: usize,
    #[serde(default)]
    pub scheme: Scheme,
}

fn default_n_sub() -> usize {
    4
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            n_sub: default_n_sub(),
            scheme: Scheme::default(),
        }
    }
}

/// Outcome of one action step.
#[derive(Clone, Debug)]
pub struct StepRecord {
    /// Wiener increments summed over the step, one per channel.
    pub dw: Vec<f64>,
    /// Integrated homodyne record per channel; `None` for gated-off channels.
    pub homodyne: Vec<Option<f64>>,
    pub post_state: DensityMatrix,
}

/// `A rho A^dagger - (rho A^dagger A + A^dagger A rho) / 2`
pub fn lindblad_d(a: &ComplexMatrix, rho: &ComplexMatrix) -> ComplexMatrix {
    let ad = a.adjoint();
    let ada = ad.matmul(a);
    let mut out = a.matmul(rho).matmul(&ad);
    out.axpy(C64::new(-0.5, 0.0), &rho.matmul(&ada));
    out.axpy(C64::new(-0.5, 0.0), &ada.matmul(rho));
    out
}

/// `A rho + rho A - <A + A^dagger> rho`
pub fn stoch_h(a: &ComplexMatrix, rho: &ComplexMatrix) -> ComplexMatrix {
    let mean = a.matmul(rho).trace() + a.adjoint().matmul(rho).trace();
    let mut out = &a.matmul(rho) + &rho.matmul(a);
    out.axpy(-mean, rho);
    out
}

/// `i (beta a^dagger - beta^* a)`
pub fn drive_hamiltonian(beta: C64, dim: usize) -> Result<ComplexMatrix> {
    let a = annihilation_op(dim)?;
    let i = C64::new(0.0, 1.0);
    let mut h = a.adjoint().scale(i * beta);
    h.axpy(-i * beta.conj(), &a);
    Ok(h)
}

/// Homodyne increment `sqrt(gamma/2) Tr(P_n rho + rho P_n) dt + dW_n`.
pub fn homodyne_record(rho_pre: &DensityMatrix, n: usize, dw: f64, dt: f64, gamma: f64) -> f64 {
    homodyne_from_population(rho_pre.matrix()[(n, n)].re, dw, dt, gamma)
}

#[inline]
fn homodyne_from_population(pop: f64, dw: f64, dt: f64, gamma: f64) -> f64 {
    (0.5 * gamma).sqrt() * 2.0 * pop * dt + dw
}

/// Integrates the conditional cavity state for fixed physics parameters.
#[derive(Clone, Debug)]
pub struct SmeEngine {
    dim: usize,
    channels: ChannelConfig,
    noise: NoiseConfig,
    integ: IntegratorConfig,
    dt: f64,
    a: ComplexMatrix,
    ad: ComplexMatrix,
}

impl SmeEngine {
    pub fn new(dim: usize, channels: ChannelConfig, noise: NoiseConfig, integ: IntegratorConfig, dt: f64) -> Result<Self> {
        channels.validate(dim)?;
        noise.validate()?;
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidConfig("integrator dt must be > 0".into()));
        }
        if integ.n_sub == 0 {
            return Err(Error::InvalidConfig("integrator.n_sub must be >= 1".into()));
        }
        let a = annihilation_op(dim)?;
        let ad = a.adjoint();
        Ok(Self {
            dim,
            channels,
            noise,
            integ,
            dt,
            a,
            ad,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn channels(&self) -> &ChannelConfig {
        &self.channels
    }

    pub fn noise(&self) -> &NoiseConfig {
        &self.noise
    }

    pub fn integrator(&self) -> &IntegratorConfig {
        &self.integ
    }

    /// `K = -iH = beta a^dagger - beta^* a`
    fn drive_generator(&self, beta: C64) -> ComplexMatrix {
        let mut k = self.ad.scale(beta);
        k.axpy(-beta.conj(), &self.a);
        k
    }

    fn active_mask(&self, gates: &[bool]) -> Vec<bool> {
        (0..self.dim).map(|n| n < self.channels.m && gates[n]).collect()
    }

    /// Advances `rho` by one action step of length `dt`.
    pub fn step<R: Rng + ?Sized>(&self, rho: &DensityMatrix, action: &ControlAction, rng: &mut R) -> Result<StepRecord> {
        let m = self.channels.m;
        if action.gates.len() != m {
            return Err(Error::ActionLength {
                expected: m,
                got: action.gates.len(),
            });
        }
        let active = self.active_mask(&action.gates);
        let h = self.dt / self.integ.n_sub as f64;
        let sqrt_h = h.sqrt();
        let gamma = self.channels.gamma_meas;
        let beta = action.beta;

        // Substep-invariant part of the Kraus operator.
        let kraus_base = match self.integ.scheme {
            Scheme::Kraus => Some(self.kraus_base(&self.drive_generator(beta), h)),
            _ => None,
        };

        let mut state = rho.matrix().clone();
        let mut dw_total = vec![0.0; m];
        let mut records: Vec<Option<f64>> = (0..m).map(|n| if active[n] { Some(0.0) } else { None }).collect();
        let mut dw = vec![0.0; m];

        for _ in 0..self.integ.n_sub {
            for (n, w) in dw.iter_mut().enumerate() {
                *w = rng.sample::<f64, _>(StandardNormal) * sqrt_h;
                dw_total[n] += *w;
                if let Some(rec) = records[n].as_mut() {
                    *rec += homodyne_from_population(state[(n, n)].re, *w, h, gamma);
                }
            }
            state = match self.integ.scheme {
                Scheme::Kraus => self.kraus_substep(&state, kraus_base.as_ref().unwrap(), &active, &dw, h),
                Scheme::EulerMaruyama => self.euler_substep(&state, beta, &active, &dw, h),
                Scheme::StochasticHeun => self.heun_substep(&state, beta, &active, &dw, h),
            };
            renormalize(&mut state);
        }

        if !state.is_finite() || !passes_positivity(&state, POSITIVITY_TOL) {
            let min_eigenvalue = if state.is_finite() {
                state.hermitian_eigenvalues()[0]
            } else {
                f64::NAN
            };
            return Err(Error::IntegratorInstability { min_eigenvalue });
        }
        Ok(StepRecord {
            dw: dw_total,
            homodyne: records,
            post_state: DensityMatrix::from_trusted(state),
        })
    }

    /// Ensemble-averaged evolution over one action step (the unconditional
    /// master equation, no record), used for noise-free lookahead. The Kraus
    /// scheme uses its unobserved form so the lookahead keeps the same order
    /// in the drive as the conditioned step; the other schemes take Euler
    /// steps of the Lindblad drift.
    pub fn drift_step(&self, rho: &DensityMatrix, beta: C64, gates: &[bool]) -> DensityMatrix {
        let active = self.active_mask(gates);
        let h = self.dt / self.integ.n_sub as f64;
        let mut state = rho.matrix().clone();
        let base = match self.integ.scheme {
            Scheme::Kraus => Some(self.kraus_base(&self.drive_generator(beta), h)),
            _ => None,
        };
        let no_noise = vec![0.0; self.channels.m];
        for _ in 0..self.integ.n_sub {
            state = match &base {
                Some(base) => self.kraus_map(&state, base, &active, &no_noise, h, 0.0),
                None => {
                    let drift = self.drift(&state, beta, &active);
                    let mut next = state;
                    next.axpy(C64::new(h, 0.0), &drift);
                    next
                }
            };
            renormalize(&mut state);
        }
        DensityMatrix::from_trusted(state)
    }

    /// Unconditional Lindblad generator applied to `rho`.
    pub fn lindblad_generator(&self, rho: &ComplexMatrix, beta: C64, gates: &[bool]) -> ComplexMatrix {
        let active = self.active_mask(gates);
        self.drift(rho, beta, &active)
    }

    /// `[K, rho] + Gamma sum_active D[P_n] rho + gamma_decay D[a] rho + (gamma_deph/2) sum_n D[P_n] rho`
    fn drift(&self, rho: &ComplexMatrix, beta: C64, active: &[bool]) -> ComplexMatrix {
        let n = self.dim;
        let mut out = drive_commutator(rho, beta);
        let rate = self.channels.rate();
        let deph = 0.5 * self.noise.gamma_dephasing;
        let decay = self.noise.gamma_decay;
        for i in 0..n {
            for j in 0..n {
                let mut coeff = 0.0;
                if i != j {
                    // D[P_k] only damps coherences touching level k
                    let hits = active[i] as u8 + active[j] as u8;
                    coeff -= 0.5 * rate * hits as f64;
                    coeff -= deph;
                }
                if decay > 0.0 {
                    coeff -= 0.5 * decay * (i + j) as f64;
                }
                out[(i, j)] += rho[(i, j)] * coeff;
            }
        }
        if decay > 0.0 {
            for i in 0..n - 1 {
                for j in 0..n - 1 {
                    let w = decay * (((i + 1) * (j + 1)) as f64).sqrt();
                    out[(i, j)] += rho[(i + 1, j + 1)] * w;
                }
            }
        }
        out
    }

    /// `H[P_n] rho` for a projector, entrywise.
    fn stoch_projector(rho: &ComplexMatrix, level: usize) -> ComplexMatrix {
        let n = rho.dim();
        let pop = rho[(level, level)].re;
        ComplexMatrix::from_fn(n, |i, j| {
            let hits = (i == level) as u8 + (j == level) as u8;
            rho[(i, j)] * (hits as f64 - 2.0 * pop)
        })
    }

    fn euler_substep(&self, rho: &ComplexMatrix, beta: C64, active: &[bool], dw: &[f64], h: f64) -> ComplexMatrix {
        let c = self.channels.stochastic_coefficient();
        let mut next = rho.clone();
        next.axpy(C64::new(h, 0.0), &self.drift(rho, beta, active));
        for (level, &w) in dw.iter().enumerate() {
            if active[level] {
                next.axpy(C64::new(c * w, 0.0), &Self::stoch_projector(rho, level));
            }
        }
        next
    }

    /// Drift converted to Stratonovich form: `f - 1/2 sum_n g_n'[g_n]` with
    /// `g_n = c H[P_n]`.
    fn stratonovich_drift(&self, rho: &ComplexMatrix, beta: C64, active: &[bool]) -> ComplexMatrix {
        let c2 = self.channels.stochastic_coefficient().powi(2);
        let mut f = self.drift(rho, beta, active);
        for level in 0..self.channels.m {
            if !active[level] {
                continue;
            }
            let g = Self::stoch_projector(rho, level);
            let pop = rho[(level, level)].re;
            let g_pop = g[(level, level)].re;
            // g'(rho)[X] = P X + X P - 2 Tr(P X) rho - 2 Tr(P rho) X
            let n = rho.dim();
            let corr = ComplexMatrix::from_fn(n, |i, j| {
                let hits = (i == level) as u8 + (j == level) as u8;
                g[(i, j)] * (hits as f64 - 2.0 * pop) - rho[(i, j)] * (2.0 * g_pop)
            });
            f.axpy(C64::new(-0.5 * c2, 0.0), &corr);
        }
        f
    }

    fn heun_substep(&self, rho: &ComplexMatrix, beta: C64, active: &[bool], dw: &[f64], h: f64) -> ComplexMatrix {
        let c = self.channels.stochastic_coefficient();
        let f0 = self.stratonovich_drift(rho, beta, active);
        let mut pred = rho.clone();
        pred.axpy(C64::new(h, 0.0), &f0);
        for (level, &w) in dw.iter().enumerate() {
            if active[level] {
                pred.axpy(C64::new(c * w, 0.0), &Self::stoch_projector(rho, level));
            }
        }
        let f1 = self.stratonovich_drift(&pred, beta, active);
        let mut next = rho.clone();
        next.axpy(C64::new(0.5 * h, 0.0), &(&f0 + &f1));
        for (level, &w) in dw.iter().enumerate() {
            if active[level] {
                let g = &Self::stoch_projector(rho, level) + &Self::stoch_projector(&pred, level);
                next.axpy(C64::new(0.5 * c * w, 0.0), &g);
            }
        }
        next
    }

    /// `I + K h + (K h)^2 / 2 - h/2 (gamma_decay a^dagger a + gamma_deph/2)`
    fn kraus_base(&self, k: &ComplexMatrix, h: f64) -> ComplexMatrix {
        let mut base = ComplexMatrix::identity(self.dim);
        base.axpy(C64::new(h, 0.0), k);
        base.axpy(C64::new(0.5 * h * h, 0.0), &k.matmul(k));
        let deph = 0.5 * self.noise.gamma_dephasing;
        for n in 0..self.dim {
            base[(n, n)] -= 0.5 * h * (self.noise.gamma_decay * n as f64 + deph);
        }
        base
    }

    /// `M rho M^dagger + sum (1 - eta) L rho L^dagger h` over all Lindblad
    /// channels, where `M` carries the measured record
    /// `dY_n = 2 sqrt(eta Gamma) <P_n> h + dW_n`.
    fn kraus_substep(&self, rho: &ComplexMatrix, base: &ComplexMatrix, active: &[bool], dw: &[f64], h: f64) -> ComplexMatrix {
        self.kraus_map(rho, base, active, dw, h, self.channels.efficiency_mode.efficiency())
    }

    fn kraus_map(&self, rho: &ComplexMatrix, base: &ComplexMatrix, active: &[bool], dw: &[f64], h: f64, eta: f64) -> ComplexMatrix {
        let rate = self.channels.rate();
        let amp = (eta * rate).sqrt();
        let mut m = base.clone();
        for (level, &w) in dw.iter().enumerate() {
            if !active[level] {
                continue;
            }
            let dy = 2.0 * amp * rho[(level, level)].re * h + w;
            m[(level, level)] += -0.5 * rate * h + amp * dy + 0.5 * eta * rate * (dy * dy - h);
        }
        let mut next = m.matmul(rho).matmul_adjoint(&m);
        let unobserved = (1.0 - eta) * rate * h;
        let deph = 0.5 * self.noise.gamma_dephasing * h;
        for level in 0..self.dim {
            let mut w = deph;
            if active[level] {
                w += unobserved;
            }
            if w != 0.0 {
                next[(level, level)] += rho[(level, level)] * w;
            }
        }
        let decay = self.noise.gamma_decay * h;
        if decay > 0.0 {
            let n = self.dim;
            for i in 0..n - 1 {
                for j in 0..n - 1 {
                    next[(i, j)] += rho[(i + 1, j + 1)] * (decay * (((i + 1) * (j + 1)) as f64).sqrt());
                }
            }
        }
        next
    }
}

/// `[beta a^dagger - beta^* a, rho]` using the band structure of `a`.
fn drive_commutator(rho: &ComplexMatrix, beta: C64) -> ComplexMatrix {
    let n = rho.dim();
    let bc = beta.conj();
    let sq: Vec<f64> = (0..=n).map(|k| (k as f64).sqrt()).collect();
    ComplexMatrix::from_fn(n, |i, j| {
        let mut v = C64::new(0.0, 0.0);
        if i > 0 {
            v += beta * sq[i] * rho[(i - 1, j)];
        }
        if i + 1 < n {
            v -= bc * sq[i + 1] * rho[(i + 1, j)];
        }
        if j + 1 < n {
            v -= beta * sq[j + 1] * rho[(i, j + 1)];
        }
        if j > 0 {
            v += bc * sq[j] * rho[(i, j - 1)];
        }
        v
    })
}

/// Hermitize, then rescale to unit trace.
fn renormalize(m: &mut ComplexMatrix) {
    m.hermitize();
    let tr = m.trace().re;
    if tr != 0.0 && tr.is_finite() {
        let inv = 1.0 / tr;
        m.as_mut_slice().iter_mut().for_each(|z| *z *= inv);
    }
}
