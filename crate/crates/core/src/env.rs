//! Episodic feedback-control environment around [`SmeEngine`].

use std::io::{self, Write};

use num_complex::Complex64 as C64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::ComplexMatrix;
use crate::sme::{ChannelConfig, IntegratorConfig, NoiseConfig, SmeEngine, StepRecord};
use crate::state::{fidelity, purity, DensityMatrix, TargetSpec};

/// Flattened density matrix: row-major real parts, then row-major imaginary
/// parts.
pub type Observation = Vec<f64>;

#[derive(Clone, Debug, PartialEq)]
pub struct ControlAction {
    pub beta: C64,
    pub gates: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct EnvConfig {
    /// Fock cutoff.
    pub n: usize,
    /// Action steps per episode.
    pub n_max: usize,
    pub t_max: f64,
    /// Drive cap `beta_max`.
    pub beta_mult: f64,
    pub theta: f64,
    pub target: TargetSpec,
    pub channels: ChannelConfig,
    pub noise: NoiseConfig,
    pub integ: IntegratorConfig,
    /// Whether the agent switches the measurement channels; otherwise all
    /// `M` channels stay on.
    pub control_channels: bool,
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::CutoffTooSmall(self.n));
        }
        if self.n_max == 0 {
            return Err(Error::InvalidConfig("env.n_max must be >= 1".into()));
        }
        if !(self.theta >= 1.0) {
            return Err(Error::InvalidConfig("env.theta must be >= 1".into()));
        }
        if !(self.t_max > 0.0) || !self.t_max.is_finite() {
            return Err(Error::InvalidConfig("env.t_max must be > 0".into()));
        }
        if !(self.beta_mult >= 0.0) || !self.beta_mult.is_finite() {
            return Err(Error::InvalidConfig("env.beta_mult must be >= 0".into()));
        }
        if self.target.dim() != self.n {
            return Err(Error::InvalidTarget(format!(
                "target built for cutoff {}, environment uses {}",
                self.target.dim(),
                self.n
            )));
        }
        self.channels.validate(self.n)?;
        self.noise.validate()?;
        if self.integ.n_sub == 0 {
            return Err(Error::InvalidConfig("integrator.n_sub must be >= 1".into()));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.t_max / self.n_max as f64
    }

    pub fn action_dim(&self) -> usize {
        if self.control_channels {
            2 + self.channels.m
        } else {
            2
        }
    }

    pub fn observation_dim(&self) -> usize {
        2 * self.n * self.n
    }

    pub fn engine(&self) -> Result<SmeEngine> {
        SmeEngine::new(self.n, self.channels.clone(), self.noise.clone(), self.integ.clone(), self.dt())
    }

    /// Maps a raw policy output to a control; components are clamped to
    /// `[-1, 1]` and gates switch on for strictly positive entries.
    pub fn decode_action(&self, raw: &[f64]) -> Result<ControlAction> {
        let expected = self.action_dim();
        if raw.len() != expected {
            return Err(Error::ActionLength { expected, got: raw.len() });
        }
        let clamp = |v: f64| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
        let beta = C64::new(clamp(raw[0]), clamp(raw[1])) * self.beta_mult;
        let gates = if self.control_channels {
            raw[2..].iter().map(|&v| v > 0.0).collect()
        } else {
            vec![true; self.channels.m]
        };
        Ok(ControlAction { beta, gates })
    }
}

pub fn encode_observation(rho: &DensityMatrix) -> Observation {
    let data = rho.matrix().as_slice();
    data.iter().map(|z| z.re).chain(data.iter().map(|z| z.im)).collect()
}

pub fn decode_observation(obs: &[f64], dim: usize) -> Result<DensityMatrix> {
    let len = dim * dim;
    if obs.len() != 2 * len {
        return Err(Error::ShapeMismatch {
            expected: 2 * len,
            got: obs.len(),
        });
    }
    let data = (0..len).map(|k| C64::new(obs[k], obs[len + k])).collect();
    DensityMatrix::new(ComplexMatrix::from_row_major(dim, data)?)
}

/// `sum(r) / n_max`
pub fn normalized_return(rewards: &[f64], n_max: usize) -> f64 {
    rewards.iter().sum::<f64>() / n_max as f64
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub fidelity: f64,
    pub action: ControlAction,
    pub record: StepRecord,
}

/// One cavity, one RNG stream. The stream persists across resets so a
/// vectorized rollout stays reproducible.
#[derive(Clone, Debug)]
pub struct Environment {
    cfg: EnvConfig,
    engine: SmeEngine,
    state: DensityMatrix,
    step: usize,
    rng: ChaCha8Rng,
}

/// Independent noise stream for trajectory `index` of a run seeded with
/// `seed`.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

impl Environment {
    pub fn new(cfg: EnvConfig, rng: ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let engine = cfg.engine()?;
        let state = DensityMatrix::fock(0, cfg.n)?;
        Ok(Self {
            cfg,
            engine,
            state,
            step: 0,
            rng,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn engine(&self) -> &SmeEngine {
        &self.engine
    }

    pub fn state(&self) -> &DensityMatrix {
        &self.state
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.n_max
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.cfg.dt()
    }

    pub fn reset(&mut self) -> Observation {
        self.state = DensityMatrix::fock(0, self.cfg.n).expect("cutoff validated");
        self.step = 0;
        encode_observation(&self.state)
    }

    pub fn reset_with_rng(&mut self, rng: ChaCha8Rng) -> Observation {
        self.rng = rng;
        self.reset()
    }

    pub fn step(&mut self, raw: &[f64]) -> Result<StepOutcome> {
        if self.is_done() {
            return Err(Error::EpisodeFinished);
        }
        let action = self.cfg.decode_action(raw)?;
        self.step_action(action)
    }

    /// Steps with an already decoded control (baselines bypass the policy
    /// encoding).
    pub fn step_action(&mut self, action: ControlAction) -> Result<StepOutcome> {
        if self.is_done() {
            return Err(Error::EpisodeFinished);
        }
        let record = self.engine.step(&self.state, &action, &mut self.rng)?;
        self.state = record.post_state.clone();
        self.step += 1;
        let f = fidelity(&self.state, &self.cfg.target);
        Ok(StepOutcome {
            observation: encode_observation(&self.state),
            reward: f.powf(self.cfg.theta),
            done: self.is_done(),
            fidelity: f,
            action,
            record,
        })
    }

    pub fn trajectory_row(&self, outcome: Option<&StepOutcome>) -> TrajectoryRow {
        let m = self.cfg.channels.m;
        let (beta, gates, records) = match outcome {
            Some(o) => (o.action.beta, o.action.gates.clone(), o.record.homodyne.clone()),
            None => (C64::new(0.0, 0.0), vec![false; m], vec![None; m]),
        };
        TrajectoryRow {
            step: self.step,
            t: self.time(),
            beta,
            gates,
            fidelity: fidelity(&self.state, &self.cfg.target),
            purity: purity(&self.state),
            populations: self.state.populations(),
            records,
        }
    }
}

/// One line of a trajectory log. Row 0 is the initial state with no control
/// applied.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub step: usize,
    pub t: f64,
    pub beta: C64,
    pub gates: Vec<bool>,
    pub fidelity: f64,
    pub purity: f64,
    pub populations: Vec<f64>,
    pub records: Vec<Option<f64>>,
}

pub fn trajectory_header(m: usize, n: usize) -> String {
    let mut cols = vec!["step".to_string(), "t".into(), "re_beta".into(), "im_beta".into()];
    cols.extend((0..m).map(|k| format!("gate_{k}")));
    cols.push("fidelity".into());
    cols.push("purity".into());
    cols.extend((0..n).map(|k| format!("p_{k}")));
    cols.extend((0..m).map(|k| format!("rec_{k}")));
    cols.join(",")
}

/// Writes the trajectory CSV; gated-off records are left empty.
pub fn write_trajectory_csv<W: Write>(mut w: W, rows: &[TrajectoryRow], m: usize, n: usize) -> io::Result<()> {
    writeln!(w, "{}", trajectory_header(m, n))?;
    for r in rows {
        let mut line = format!("{},{},{},{}", r.step, r.t, r.beta.re, r.beta.im);
        for &g in &r.gates {
            line.push_str(if g { ",1" } else { ",0" });
        }
        line.push_str(&format!(",{},{}", r.fidelity, r.purity));
        for p in &r.populations {
            line.push_str(&format!(",{p}"));
        }
        for rec in &r.records {
            match rec {
                Some(v) => line.push_str(&format!(",{v}")),
                None => line.push(','),
            }
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Result of running one episode to completion.
#[derive(Clone, Debug, Default)]
pub struct EpisodeResult {
    pub rewards: Vec<f64>,
    pub final_fidelity: f64,
    /// Filled only when logging was requested; `n_max + 1` rows.
    pub rows: Vec<TrajectoryRow>,
    /// States at the requested snapshot steps.
    pub snapshots: Vec<(usize, DensityMatrix)>,
}

/// Resets `env` and runs `policy` until the episode ends.
pub fn run_episode<F>(env: &mut Environment, mut policy: F, log: bool, snapshot_steps: &[usize]) -> Result<EpisodeResult>
where
    F: FnMut(&Observation) -> Vec<f64>,
{
    let mut obs = env.reset();
    let mut out = EpisodeResult::default();
    if log {
        out.rows.push(env.trajectory_row(None));
    }
    if snapshot_steps.contains(&0) {
        out.snapshots.push((0, env.state().clone()));
    }
    loop {
        let raw = policy(&obs);
        let o = env.step(&raw)?;
        out.rewards.push(o.reward);
        out.final_fidelity = o.fidelity;
        if log {
            out.rows.push(env.trajectory_row(Some(&o)));
        }
        if snapshot_steps.contains(&env.steps_taken()) {
            out.snapshots.push((env.steps_taken(), env.state().clone()));
        }
        obs = o.observation;
        if o.done {
            return Ok(out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sme::{EfficiencyMode, Scheme};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn cfg(control: bool) -> EnvConfig {
        let n = 6;
        EnvConfig {
            n,
            n_max: 20,
            t_max: 1.0,
            beta_mult: 20.0,
            theta: 8.0,
            target: TargetSpec::fock(1, n).unwrap(),
            channels: ChannelConfig {
                m: 2,
                gamma_meas: 400.0,
                efficiency_mode: EfficiencyMode::PurityPreserving,
            },
            noise: NoiseConfig::default(),
            integ: IntegratorConfig {
                n_sub: 4,
                scheme: Scheme::Kraus,
            },
            control_channels: control,
        }
    }

    #[test]
    fn reset_gives_vacuum() {
        let mut env = Environment::new(cfg(true), trajectory_rng(0, 0)).unwrap();
        let obs = env.reset();
        assert_eq!(obs.len(), 72);
        assert_eq!(obs[0], 1.0);
        assert!(obs[1..].iter().all(|&v| v == 0.0));
        let rho = decode_observation(&obs, 6).unwrap();
        assert_abs_diff_eq!(rho.matrix().trace().re, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn identical_streams_give_identical_episodes() {
        let run = || {
            let mut env = Environment::new(cfg(true), trajectory_rng(5, 2)).unwrap();
            run_episode(&mut env, |_| vec![0.1, -0.05, 0.5, -0.5], false, &[]).unwrap().rewards
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn decode_examples() {
        let c = cfg(false);
        let a = c.decode_action(&[1.0, 1.0]).unwrap();
        assert_eq!(a.beta, C64::new(20.0, 20.0));
        assert_eq!(a.gates, vec![true, true]);

        let c = cfg(true);
        let a = c.decode_action(&[0.0, 0.0, -0.3, 0.7]).unwrap();
        assert_eq!(a.beta, C64::new(0.0, 0.0));
        assert_eq!(a.gates, vec![false, true]);

        let a = c.decode_action(&[1.7, -3.0, 0.0, 1.0]).unwrap();
        assert_eq!(a.beta, C64::new(20.0, -20.0));
        assert_eq!(a.gates, vec![false, true]);

        assert!(matches!(c.decode_action(&[0.0, 0.0]), Err(Error::ActionLength { expected: 4, got: 2 })));
    }

    #[test]
    fn reward_is_fidelity_power() {
        let mut c = cfg(false);
        c.target = TargetSpec::fock(0, 6).unwrap();
        c.channels.gamma_meas = 0.0;
        let mut env = Environment::new(c, trajectory_rng(0, 0)).unwrap();
        env.reset();
        let o = env.step(&[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(o.reward, 1.0, epsilon = 1e-12);
        assert_eq!(0.5f64.powf(8.0), 0.00390625);
    }

    #[test]
    fn superposition_reward_punishes_half_fidelity() {
        let n = 6;
        let mut c = cfg(false);
        c.target = TargetSpec::new(&[(1, C64::new(1.0, 0.0)), (3, C64::new(1.0, 0.0))], n).unwrap();
        let f = fidelity(&DensityMatrix::fock(1, n).unwrap(), &c.target);
        assert_abs_diff_eq!(f, 0.5, epsilon = 1e-12);
        assert!(f.powf(c.theta) < 0.01 * f);
    }

    #[test]
    fn finished_episode_rejects_steps() {
        let mut env = Environment::new(cfg(false), trajectory_rng(0, 0)).unwrap();
        let res = run_episode(&mut env, |_| vec![0.0, 0.0], true, &[0, 10, 20]).unwrap();
        assert_eq!(res.rewards.len(), 20);
        assert_eq!(res.rows.len(), 21);
        assert_eq!(res.snapshots.iter().map(|s| s.0).collect::<Vec<_>>(), vec![0, 10, 20]);
        assert!(matches!(env.step(&[0.0, 0.0]), Err(Error::EpisodeFinished)));
    }

    #[test]
    fn normalized_return_examples() {
        assert_eq!(normalized_return(&[1.0; 10], 10), 1.0);
        assert_eq!(normalized_return(&[0.0; 10], 10), 0.0);
        let half: Vec<f64> = (0..10).map(|k| if k < 5 { 1.0 } else { 0.0 }).collect();
        assert_eq!(normalized_return(&half, 10), 0.5);
    }

    #[test]
    fn trajectory_csv_layout() {
        let mut env = Environment::new(cfg(true), trajectory_rng(1, 0)).unwrap();
        let res = run_episode(&mut env, |_| vec![0.0, 0.0, 1.0, -1.0], true, &[]).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &res.rows, 2, 6).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "step,t,re_beta,im_beta,gate_0,gate_1,fidelity,purity,p_0,p_1,p_2,p_3,p_4,p_5,rec_0,rec_1"
        );
        assert_eq!(lines.len(), 22);
        for l in &lines[1..] {
            assert_eq!(l.split(',').count(), 16);
        }
        assert!(lines[1].ends_with(",,"));
        let last: Vec<&str> = lines[21].split(',').collect();
        assert_eq!(last[4], "1");
        assert_eq!(last[5], "0");
        assert!(!last[14].is_empty());
        assert!(last[15].is_empty());
    }

    proptest! {
        #[test]
        fn observation_round_trip(seed in 0u64..1000, dim in 2usize..6) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let psi: Vec<C64> = (0..dim).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
            let rho = DensityMatrix::pure(&psi).unwrap();
            let obs = encode_observation(&rho);
            prop_assert_eq!(obs.len(), 2 * dim * dim);
            let back = decode_observation(&obs, dim).unwrap();
            prop_assert_eq!(encode_observation(&back), obs);
        }

        #[test]
        fn reward_bounded_and_monotone(f1 in 0.0f64..1.0, f2 in 0.0f64..1.0, theta in 1.0f64..12.0) {
            let (lo, hi) = if f1 < f2 { (f1, f2) } else { (f2, f1) };
            prop_assert!(lo.powf(theta) <= hi.powf(theta));
            prop_assert!((0.0..=1.0).contains(&hi.powf(theta)));
        }
    }
}
