//! Proximal policy optimization with generalized advantage estimation.

use std::io::{self, Write};

use fock_core::env::{encode_observation, trajectory_rng, EnvConfig, Environment, Observation, TrajectoryRow};
use fock_core::state::{fidelity, DensityMatrix};
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{gaussian_entropy, gaussian_log_prob, AdamState, GaussianPolicy, Mlp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lam: f64,
    pub n_steps: usize,
    pub n_envs: usize,
    pub clip: f64,
    pub ent_coef: f64,
    pub vf_coef: f64,
    pub max_grad_norm: f64,
    pub lr: f64,
    pub n_minibatches: usize,
    pub n_epochs: usize,
    pub total_updates: usize,
    /// Fixed standard deviation of every action component.
    pub sigma: f64,
    pub hidden: Vec<usize>,
    /// Run a deterministic evaluation every this many updates (0: never).
    pub eval_interval: usize,
    pub eval_trajectories: usize,
    /// Stop once a periodic evaluation reaches this mean final fidelity.
    pub stop_fidelity: Option<f64>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lam: 0.95,
            n_steps: 128,
            n_envs: 8,
            clip: 0.2,
            ent_coef: 0.0,
            vf_coef: 0.5,
            max_grad_norm: 0.5,
            lr: 2.5e-4,
            n_minibatches: 4,
            n_epochs: 4,
            total_updates: 2000,
            sigma: 0.4,
            hidden: vec![64, 64],
            eval_interval: 0,
            eval_trajectories: 50,
            stop_fidelity: None,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail("ppo.gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lam) {
            return fail("ppo.lam must lie in [0, 1]");
        }
        if !(self.clip > 0.0) {
            return fail("ppo.clip must be > 0");
        }
        if self.n_envs == 0 {
            return fail("ppo.n_envs must be >= 1");
        }
        if self.n_steps == 0 {
            return fail("ppo.n_steps must be >= 1");
        }
        if self.n_minibatches == 0 || self.n_minibatches > self.n_steps * self.n_envs {
            return fail("ppo.n_minibatches must lie in [1, n_steps * n_envs]");
        }
        if self.n_epochs == 0 {
            return fail("ppo.n_epochs must be >= 1");
        }
        if !(self.lr > 0.0) {
            return fail("ppo.lr must be > 0");
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return fail("ppo.sigma must be > 0");
        }
        if !(self.vf_coef >= 0.0) || !(self.ent_coef >= 0.0) {
            return fail("ppo.vf_coef and ppo.ent_coef must be >= 0");
        }
        if !(self.max_grad_norm > 0.0) {
            return fail("ppo.max_grad_norm must be > 0");
        }
        if self.hidden.contains(&0) {
            return fail("ppo.hidden widths must be >= 1");
        }
        Ok(())
    }
}

/// Transitions from `n_envs` environments over `n_steps` steps, stored
/// step-major (`index = t * n_envs + e`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBatch {
    pub n_steps: usize,
    pub n_envs: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
    pub logp: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    /// True when the episode ended with this transition.
    pub dones: Vec<bool>,
    /// Value estimates of the states following the last step.
    pub last_values: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.n_steps * self.n_envs
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// GAE advantages and value targets (`advantage + value`), before any
/// normalization.
pub fn compute_gae(batch: &RolloutBatch, gamma: f64, lam: f64) -> (Vec<f64>, Vec<f64>) {
    let (t_len, e_len) = (batch.n_steps, batch.n_envs);
    let mut adv = vec![0.0; t_len * e_len];
    for e in 0..e_len {
        let mut running = 0.0;
        for t in (0..t_len).rev() {
            let i = t * e_len + e;
            let next_value = if t + 1 < t_len { batch.values[i + e_len] } else { batch.last_values[e] };
            let live = if batch.dones[i] { 0.0 } else { 1.0 };
            let delta = batch.rewards[i] + gamma * next_value * live - batch.values[i];
            running = delta + gamma * lam * live * running;
            adv[i] = running;
        }
    }
    let ret = adv.iter().zip(&batch.values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Rescales to zero mean and unit variance.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var.sqrt() + 1e-8);
    adv.iter_mut().for_each(|a| *a = (*a - mean) * inv);
}

/// One optimization minibatch.
#[derive(Clone, Debug)]
pub struct Minibatch {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub logp_old: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_frac: f64,
    pub approx_kl: f64,
    pub grad_policy: Vec<f64>,
    pub grad_value: Vec<f64>,
}

/// `min(r A, clip(r, 1 - eps, 1 + eps) A)` and its derivative with respect
/// to `r`.
pub fn clipped_objective(ratio: f64, adv: f64, eps: f64) -> (f64, f64) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
    if unclipped <= clipped {
        (unclipped, adv)
    } else if ratio > 1.0 - eps && ratio < 1.0 + eps {
        (clipped, adv)
    } else {
        (clipped, 0.0)
    }
}

/// Clipped-surrogate loss with value and entropy terms, plus gradients with
/// respect to both networks.
pub fn ppo_loss(policy: &GaussianPolicy, value: &Mlp, mb: &Minibatch, clip: f64, vf_coef: f64, ent_coef: f64) -> Result<LossOutput> {
    let b = mb.obs.nrows();
    let bf = b as f64;
    let pcache = policy.net.forward_cached(mb.obs.view())?;
    let mean = pcache.output();
    let act_dim = mean.ncols();
    let mut up_pi = Array2::zeros((b, act_dim));
    let (mut surr, mut clipped, mut kl) = (0.0, 0usize, 0.0);
    for i in 0..b {
        let mu = mean.row(i);
        let a = mb.actions.row(i);
        let lp = gaussian_log_prob(mu.as_slice().unwrap(), a.as_slice().unwrap(), &policy.sigma);
        let log_ratio = lp - mb.logp_old[i];
        let ratio = log_ratio.exp();
        let (obj, d_ratio) = clipped_objective(ratio, mb.advantages[i], clip);
        surr += obj;
        if (ratio - 1.0).abs() > clip {
            clipped += 1;
        }
        kl += 0.5 * log_ratio * log_ratio;
        // dL/dlogp = -(dobj/dratio) * ratio / B; dlogp/dmu = (a - mu) / sigma^2
        let g = -d_ratio * ratio / bf;
        for d in 0..act_dim {
            let s = policy.sigma[d];
            up_pi[(i, d)] = g * (a[d] - mu[d]) / (s * s);
        }
    }
    let policy_loss = -surr / bf;

    let vcache = value.forward_cached(mb.obs.view())?;
    let v = vcache.output();
    let mut up_v = Array2::zeros((b, 1));
    let mut sq = 0.0;
    for i in 0..b {
        let diff = v[(i, 0)] - mb.returns[i];
        sq += diff * diff;
        up_v[(i, 0)] = vf_coef * 2.0 * diff / bf;
    }
    let value_loss = sq / bf;
    let entropy = gaussian_entropy(&policy.sigma);
    let loss = policy_loss + vf_coef * value_loss - ent_coef * entropy;
    let grad_policy = policy.net.backward(&pcache, up_pi.view())?;
    let grad_value = value.backward(&vcache, up_v.view())?;
    Ok(LossOutput {
        loss,
        policy_loss,
        value_loss,
        entropy,
        clip_frac: clipped as f64 / bf,
        approx_kl: kl / bf,
        grad_policy,
        grad_value,
    })
}

/// Scales all gradients jointly so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [&mut Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.iter_mut().for_each(|x| *x *= s));
    }
    norm
}

/// Metrics of one PPO update.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateStats {
    pub update: usize,
    pub env_steps: usize,
    /// Over episodes finished during this update's rollout; NaN if none.
    pub mean_return_norm: f64,
    pub mean_final_fidelity: f64,
    pub episodes: usize,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_frac: f64,
    pub approx_kl: f64,
    pub grad_norm: f64,
}

pub const TRAINING_LOG_HEADER: &str =
    "update,env_steps,mean_return_norm,mean_final_fidelity,policy_loss,value_loss,clip_frac,approx_kl,grad_norm";

impl UpdateStats {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.update,
            self.env_steps,
            self.mean_return_norm,
            self.mean_final_fidelity,
            self.policy_loss,
            self.value_loss,
            self.clip_frac,
            self.approx_kl,
            self.grad_norm
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeStat {
    pub normalized_return: f64,
    pub final_fidelity: f64,
}

/// Outcome of a periodic deterministic evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPoint {
    pub update: usize,
    pub episodes: usize,
    pub mean_final_fidelity: f64,
    pub std_final_fidelity: f64,
}

pub const EVAL_LOG_HEADER: &str = "update,episodes,mean_final_fidelity,std_final_fidelity";

impl EvalPoint {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.update, self.episodes, self.mean_final_fidelity, self.std_final_fidelity
        )
    }
}

const TRAINER_STREAM: u64 = 1 << 48;
const ACTION_STREAM: u64 = 1 << 40;
const EVAL_SEED_SALT: u64 = 0x6576_616c;

/// Seed of the deterministic evaluation streams belonging to a training seed.
pub fn eval_seed(seed: u64) -> u64 {
    seed ^ EVAL_SEED_SALT
}

/// Policy, value network, optimizers and the vectorized environments.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub env_cfg: EnvConfig,
    pub cfg: PpoConfig,
    pub seed: u64,
    pub policy: GaussianPolicy,
    pub value: Mlp,
    pub adam_policy: AdamState,
    pub adam_value: AdamState,
    envs: Vec<Environment>,
    obs: Vec<Observation>,
    ep_rewards: Vec<f64>,
    rng: ChaCha8Rng,
    pub updates_done: usize,
    pub env_steps: usize,
    pub episodes_done: usize,
}

impl Trainer {
    pub fn new(env_cfg: EnvConfig, cfg: PpoConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        env_cfg.validate()?;
        let mut rng = trajectory_rng(seed, TRAINER_STREAM);
        let obs_dim = env_cfg.observation_dim();
        let act_dim = env_cfg.action_dim();
        let mut sizes = vec![obs_dim];
        sizes.extend(&cfg.hidden);
        let mut psizes = sizes.clone();
        psizes.push(act_dim);
        let mut vsizes = sizes;
        vsizes.push(1);
        let gain = 2f64.sqrt();
        let pnet = Mlp::orthogonal(&psizes, gain, 0.01, &mut rng)?;
        let value = Mlp::orthogonal(&vsizes, gain, 1.0, &mut rng)?;
        let policy = GaussianPolicy::new(pnet, vec![cfg.sigma; act_dim])?;
        let mut envs = Vec::with_capacity(cfg.n_envs);
        for e in 0..cfg.n_envs {
            envs.push(Environment::new(env_cfg.clone(), trajectory_rng(seed, e as u64))?);
        }
        let obs = envs.iter_mut().map(|e| e.reset()).collect();
        Ok(Self {
            adam_policy: AdamState::new(policy.net.n_params()),
            adam_value: AdamState::new(value.n_params()),
            ep_rewards: vec![0.0; cfg.n_envs],
            env_cfg,
            cfg,
            seed,
            policy,
            value,
            envs,
            obs,
            rng,
            updates_done: 0,
            env_steps: 0,
            episodes_done: 0,
        })
    }

    fn obs_matrix(&self) -> Array2<f64> {
        let d = self.env_cfg.observation_dim();
        let flat: Vec<f64> = self.obs.iter().flatten().copied().collect();
        Array2::from_shape_vec((self.obs.len(), d), flat).unwrap()
    }

    /// Steps every environment `n_steps` times with sampled actions,
    /// resetting finished episodes.
    pub fn collect_rollout(&mut self, n_steps: usize) -> Result<(RolloutBatch, Vec<EpisodeStat>)> {
        let n_envs = self.envs.len();
        let obs_dim = self.env_cfg.observation_dim();
        let act_dim = self.env_cfg.action_dim();
        let n_max = self.env_cfg.n_max;
        let mut batch = RolloutBatch {
            n_steps,
            n_envs,
            obs_dim,
            act_dim,
            ..Default::default()
        };
        let mut stats = Vec::new();
        for _ in 0..n_steps {
            let x = self.obs_matrix();
            let means = self.policy.net.forward(x.view())?;
            let values = self.value.forward(x.view())?;
            let mut actions = Vec::with_capacity(n_envs);
            for e in 0..n_envs {
                let (a, lp) = self.policy.sample_around(means.row(e).as_slice().unwrap(), &mut self.rng);
                batch.obs.extend_from_slice(&self.obs[e]);
                batch.actions.extend_from_slice(&a);
                batch.logp.push(lp);
                batch.values.push(values[(e, 0)]);
                actions.push(a);
            }
            let outcomes: Vec<_> = self
                .envs
                .par_iter_mut()
                .zip(actions.par_iter())
                .map(|(env, a)| env.step(a))
                .collect();
            for (e, out) in outcomes.into_iter().enumerate() {
                let o = out.map_err(|source| Error::Env { index: e, source })?;
                batch.rewards.push(o.reward);
                batch.dones.push(o.done);
                self.ep_rewards[e] += o.reward;
                if o.done {
                    stats.push(EpisodeStat {
                        normalized_return: self.ep_rewards[e] / n_max as f64,
                        final_fidelity: o.fidelity,
                    });
                    self.ep_rewards[e] = 0.0;
                    self.obs[e] = self.envs[e].reset();
                } else {
                    self.obs[e] = o.observation;
                }
            }
            self.env_steps += n_envs;
        }
        if n_steps > 0 {
            let x = self.obs_matrix();
            batch.last_values = self.value.forward(x.view())?.column(0).to_vec();
        } else {
            batch.last_values = vec![0.0; n_envs];
        }
        self.episodes_done += stats.len();
        Ok((batch, stats))
    }

    /// One collect-and-optimize cycle.
    pub fn update(&mut self) -> Result<UpdateStats> {
        let (batch, episodes) = self.collect_rollout(self.cfg.n_steps)?;
        let (mut adv, ret) = compute_gae(&batch, self.cfg.gamma, self.cfg.lam);
        normalize_advantages(&mut adv);

        let n = batch.len();
        let mb_size = n / self.cfg.n_minibatches;
        let mut idx: Vec<usize> = (0..n).collect();
        let mut acc = [0.0f64; 5];
        let mut count = 0usize;
        for _ in 0..self.cfg.n_epochs {
            idx.shuffle(&mut self.rng);
            for chunk in idx.chunks(mb_size).take(self.cfg.n_minibatches) {
                let mb = gather(&batch, &adv, &ret, chunk);
                let mut out = ppo_loss(&self.policy, &self.value, &mb, self.cfg.clip, self.cfg.vf_coef, self.cfg.ent_coef)?;
                if !out.loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        update: self.updates_done + 1,
                    });
                }
                let norm = clip_grad_norm(&mut [&mut out.grad_policy, &mut out.grad_value], self.cfg.max_grad_norm);
                self.adam_policy.update(self.policy.net.params_mut(), &out.grad_policy, self.cfg.lr)?;
                self.adam_value.update(self.value.params_mut(), &out.grad_value, self.cfg.lr)?;
                for (slot, v) in acc.iter_mut().zip([out.policy_loss, out.value_loss, out.clip_frac, out.approx_kl, norm]) {
                    *slot += v;
                }
                count += 1;
            }
        }
        self.updates_done += 1;
        let c = count.max(1) as f64;
        let mean_of = |f: fn(&EpisodeStat) -> f64| {
            if episodes.is_empty() {
                f64::NAN
            } else {
                episodes.iter().map(f).sum::<f64>() / episodes.len() as f64
            }
        };
        Ok(UpdateStats {
            update: self.updates_done,
            env_steps: self.env_steps,
            mean_return_norm: mean_of(|s| s.normalized_return),
            mean_final_fidelity: mean_of(|s| s.final_fidelity),
            episodes: episodes.len(),
            policy_loss: acc[0] / c,
            value_loss: acc[1] / c,
            clip_frac: acc[2] / c,
            approx_kl: acc[3] / c,
            grad_norm: acc[4] / c,
        })
    }

    /// Deterministic evaluation on streams independent of training.
    pub fn evaluate_now(&self, n_traj: usize) -> Result<EvalReport> {
        evaluate(
            &self.policy,
            &self.env_cfg,
            &EvalOptions {
                n_traj,
                deterministic: true,
                seed: eval_seed(self.seed),
                ..Default::default()
            },
        )
    }

    /// Runs the remaining updates, calling `on_update` after each one and
    /// `on_eval` after each periodic evaluation. Returns the evaluations
    /// performed.
    pub fn train<F, G>(&mut self, mut on_update: F, mut on_eval: G) -> Result<Vec<EvalPoint>>
    where
        F: FnMut(&Trainer, &UpdateStats),
        G: FnMut(&EvalPoint),
    {
        let mut evals = Vec::new();
        while self.updates_done < self.cfg.total_updates {
            let stats = self.update()?;
            on_update(self, &stats);
            let interval = self.cfg.eval_interval;
            if interval > 0 && (self.updates_done % interval == 0 || self.updates_done == self.cfg.total_updates) {
                let rep = self.evaluate_now(self.cfg.eval_trajectories)?;
                let point = EvalPoint {
                    update: self.updates_done,
                    episodes: self.episodes_done,
                    mean_final_fidelity: rep.mean_final_fidelity,
                    std_final_fidelity: rep.std_final_fidelity,
                };
                on_eval(&point);
                evals.push(point);
                if let Some(goal) = self.cfg.stop_fidelity {
                    if rep.mean_final_fidelity >= goal {
                        break;
                    }
                }
            }
        }
        Ok(evals)
    }
}

fn gather(batch: &RolloutBatch, adv: &[f64], ret: &[f64], idx: &[usize]) -> Minibatch {
    let (od, ad) = (batch.obs_dim, batch.act_dim);
    let mut obs = Vec::with_capacity(idx.len() * od);
    let mut actions = Vec::with_capacity(idx.len() * ad);
    for &i in idx {
        obs.extend_from_slice(&batch.obs[i * od..(i + 1) * od]);
        actions.extend_from_slice(&batch.actions[i * ad..(i + 1) * ad]);
    }
    Minibatch {
        obs: Array2::from_shape_vec((idx.len(), od), obs).unwrap(),
        actions: Array2::from_shape_vec((idx.len(), ad), actions).unwrap(),
        logp_old: idx.iter().map(|&i| batch.logp[i]).collect(),
        advantages: idx.iter().map(|&i| adv[i]).collect(),
        returns: idx.iter().map(|&i| ret[i]).collect(),
    }
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub n_traj: usize,
    /// Use the Gaussian mean instead of sampling.
    pub deterministic: bool,
    pub seed: u64,
    /// Keep full trajectory logs for the first this many trajectories.
    pub keep_trajectories: usize,
    /// Steps at which final-state snapshots are collected from every
    /// trajectory (for Wigner averages).
    pub snapshot_steps: Vec<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub final_fidelities: Vec<f64>,
    pub normalized_returns: Vec<f64>,
    pub mean_final_fidelity: f64,
    pub std_final_fidelity: f64,
    /// `mean_populations[step][n]` for steps `0..=n_max`; empty when no
    /// trajectory ran.
    pub mean_populations: Vec<Vec<f64>>,
    pub trajectories: Vec<Vec<TrajectoryRow>>,
    /// Trajectory-averaged density matrices at the requested steps.
    pub mean_states: Vec<(usize, DensityMatrix)>,
}

struct TrajOut {
    final_fidelity: f64,
    ret: f64,
    pops: Vec<Vec<f64>>,
    rows: Option<Vec<TrajectoryRow>>,
    snaps: Vec<(usize, DensityMatrix)>,
}

fn run_eval_trajectory(policy: &GaussianPolicy, env_cfg: &EnvConfig, opts: &EvalOptions, i: usize) -> Result<TrajOut> {
    let mut env = Environment::new(env_cfg.clone(), trajectory_rng(opts.seed, i as u64))?;
    let mut act_rng = trajectory_rng(opts.seed, ACTION_STREAM + i as u64);
    let keep = i < opts.keep_trajectories;
    let mut obs = env.reset();
    let mut pops = vec![env.state().populations()];
    let mut rows = keep.then(|| vec![env.trajectory_row(None)]);
    let mut snaps = Vec::new();
    if opts.snapshot_steps.contains(&0) {
        snaps.push((0, env.state().clone()));
    }
    let mut ret = 0.0;
    loop {
        let mean = policy.mean(&obs)?;
        let raw = if opts.deterministic {
            mean
        } else {
            policy.sample_around(&mean, &mut act_rng).0
        };
        let o = env.step(&raw).map_err(|source| Error::Env { index: i, source })?;
        ret += o.reward;
        pops.push(env.state().populations());
        if let Some(r) = rows.as_mut() {
            r.push(env.trajectory_row(Some(&o)));
        }
        if opts.snapshot_steps.contains(&env.steps_taken()) {
            snaps.push((env.steps_taken(), env.state().clone()));
        }
        obs = o.observation;
        if o.done {
            return Ok(TrajOut {
                final_fidelity: fidelity(env.state(), &env_cfg.target),
                ret: ret / env_cfg.n_max as f64,
                pops,
                rows,
                snaps,
            });
        }
    }
}

const EVAL_CHUNK: usize = 32;

/// Runs `n_traj` episodes from vacuum; trajectory `i` draws physics noise
/// from stream `i` of `opts.seed`, so results do not depend on the number of
/// worker threads.
pub fn evaluate(policy: &GaussianPolicy, env_cfg: &EnvConfig, opts: &EvalOptions) -> Result<EvalReport> {
    env_cfg.validate()?;
    let mut rep = EvalReport::default();
    let n = env_cfg.n;
    let mut pop_sum: Vec<Vec<f64>> = Vec::new();
    let mut snap_sum: Vec<(usize, fock_core::ComplexMatrix)> = Vec::new();
    let mut start = 0;
    while start < opts.n_traj {
        let end = (start + EVAL_CHUNK).min(opts.n_traj);
        let outs: Vec<Result<TrajOut>> = (start..end)
            .into_par_iter()
            .map(|i| run_eval_trajectory(policy, env_cfg, opts, i))
            .collect();
        for out in outs {
            let out = out?;
            rep.final_fidelities.push(out.final_fidelity);
            rep.normalized_returns.push(out.ret);
            if pop_sum.is_empty() {
                pop_sum = vec![vec![0.0; n]; out.pops.len()];
            }
            for (acc, p) in pop_sum.iter_mut().zip(&out.pops) {
                acc.iter_mut().zip(p).for_each(|(a, b)| *a += b);
            }
            if snap_sum.is_empty() {
                snap_sum = out.snaps.iter().map(|(s, _)| (*s, fock_core::ComplexMatrix::zeros(n))).collect();
            }
            for ((_, acc), (_, rho)) in snap_sum.iter_mut().zip(&out.snaps) {
                *acc += rho.matrix();
            }
            if let Some(rows) = out.rows {
                rep.trajectories.push(rows);
            }
        }
        start = end;
    }
    let k = rep.final_fidelities.len();
    if k > 0 {
        let kf = k as f64;
        rep.mean_final_fidelity = rep.final_fidelities.iter().sum::<f64>() / kf;
        rep.std_final_fidelity =
            (rep.final_fidelities.iter().map(|f| (f - rep.mean_final_fidelity).powi(2)).sum::<f64>() / kf).sqrt();
        rep.mean_populations = pop_sum.into_iter().map(|v| v.into_iter().map(|x| x / kf).collect()).collect();
        for (step, m) in snap_sum {
            rep.mean_states.push((step, DensityMatrix::new(m.scale_real(1.0 / kf))?));
        }
    }
    Ok(rep)
}

/// Histogram of final fidelities over `bins` equal bins on `[0, 1]`.
pub fn fidelity_histogram(fidelities: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    let mut counts = vec![0usize; bins];
    for &f in fidelities {
        let b = ((f * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(b, c)| (b as f64 / bins as f64, (b + 1) as f64 / bins as f64, c))
        .collect()
}

/// Deterministic policy output for a given state.
pub fn policy_output(policy: &GaussianPolicy, rho: &DensityMatrix) -> Result<Vec<f64>> {
    policy.mean(&encode_observation(rho))
}

pub fn write_training_log<W: Write>(mut w: W, rows: &[UpdateStats]) -> io::Result<()> {
    writeln!(w, "{TRAINING_LOG_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Convenience view of a row-major buffer.
pub fn as_matrix(data: &[f64], cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((data.len() / cols, cols), data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use fock_core::sme::{ChannelConfig, EfficiencyMode, IntegratorConfig, NoiseConfig};
    use fock_core::TargetSpec;
    use rand::{Rng, SeedableRng};

    fn env_cfg(n_max: usize) -> EnvConfig {
        let n = 4;
        EnvConfig {
            n,
            n_max,
            t_max: n_max as f64 * 1e-3,
            beta_mult: 20.0,
            theta: 8.0,
            target: TargetSpec::fock(1, n).unwrap(),
            channels: ChannelConfig {
                m: n,
                gamma_meas: 400.0,
                efficiency_mode: EfficiencyMode::PurityPreserving,
            },
            noise: NoiseConfig::default(),
            integ: IntegratorConfig::default(),
            control_channels: false,
        }
    }

    fn small_ppo() -> PpoConfig {
        PpoConfig {
            n_steps: 16,
            n_envs: 2,
            hidden: vec![8, 8],
            total_updates: 3,
            ..Default::default()
        }
    }

    fn random_batch(seed: u64, n_steps: usize, n_envs: usize) -> RolloutBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = n_steps * n_envs;
        RolloutBatch {
            n_steps,
            n_envs,
            obs_dim: 0,
            act_dim: 0,
            rewards: (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
            values: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            dones: (0..n).map(|_| rng.gen_bool(0.15)).collect(),
            last_values: (0..n_envs).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ..Default::default()
        }
    }

    #[test]
    fn gae_lambda_one_is_discounted_return() {
        for seed in 0..20 {
            let gamma = 0.97;
            let b = random_batch(seed, 12, 3);
            let (adv, ret) = compute_gae(&b, gamma, 1.0);
            for e in 0..3 {
                for t in 0..12 {
                    // direct sum of discounted rewards up to the episode end,
                    // bootstrapped at the rollout edge
                    let mut g = 0.0;
                    let mut disc = 1.0;
                    let mut k = t;
                    loop {
                        let i = k * 3 + e;
                        g += disc * b.rewards[i];
                        disc *= gamma;
                        if b.dones[i] {
                            break;
                        }
                        k += 1;
                        if k == 12 {
                            g += disc * b.last_values[e];
                            break;
                        }
                    }
                    let i = t * 3 + e;
                    assert_abs_diff_eq!(adv[i], g - b.values[i], epsilon = 1e-12);
                    assert_abs_diff_eq!(ret[i], g, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn gae_examples() {
        let b = RolloutBatch {
            n_steps: 1,
            n_envs: 1,
            rewards: vec![1.0],
            values: vec![0.0],
            dones: vec![true],
            last_values: vec![5.0],
            ..Default::default()
        };
        assert_eq!(compute_gae(&b, 0.99, 0.95).0, vec![1.0]);

        let b = RolloutBatch {
            n_steps: 4,
            n_envs: 1,
            rewards: vec![0.3; 4],
            values: vec![0.3; 4],
            dones: vec![false, false, false, true],
            last_values: vec![0.0],
            ..Default::default()
        };
        // gamma = 1: delta_t = r + V(next) - V = V(next), zero only at the end; use V = r with
        // terminal value 0 and next values... equal rewards and predictions
        let mut c = b.clone();
        c.values = vec![1.2, 0.9, 0.6, 0.3];
        let (adv, _) = compute_gae(&c, 1.0, 0.7);
        assert!(adv.iter().all(|a| a.abs() < 1e-15));
    }

    #[test]
    fn empty_rollout() {
        let mut tr = Trainer::new(env_cfg(10), small_ppo(), 1).unwrap();
        let (b, stats) = tr.collect_rollout(0).unwrap();
        assert!(b.is_empty());
        assert!(stats.is_empty());
    }

    #[test]
    fn rollouts_are_reproducible_and_bounded() {
        let run = || {
            let mut tr = Trainer::new(env_cfg(10), small_ppo(), 9).unwrap();
            tr.collect_rollout(25).unwrap()
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert_eq!(sa.len(), 4);
        assert!(a.rewards.iter().all(|r| (0.0..=1.0).contains(r)));
        assert!(a.logp.iter().all(|l| l.is_finite()));
        assert_eq!(a.obs.len(), 25 * 2 * 32);
    }

    #[test]
    fn clip_arithmetic() {
        assert_abs_diff_eq!(clipped_objective(1.5, 1.0, 0.2).0, 1.2, epsilon = 1e-15);
        assert_eq!(clipped_objective(1.5, 1.0, 0.2).1, 0.0);
        assert_abs_diff_eq!(clipped_objective(0.5, -1.0, 0.2).0, -0.8, epsilon = 1e-15);
        assert_eq!(clipped_objective(0.5, -1.0, 0.2).1, 0.0);
        assert_eq!(clipped_objective(0.5, 1.0, 0.2), (0.5, 1.0));
        assert_eq!(clipped_objective(1.1, -2.0, 0.2), (-2.2, -2.0));
    }

    fn synthetic_minibatch(policy: &GaussianPolicy, seed: u64, b: usize) -> Minibatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let od = policy.net.input_dim();
        let obs = Array2::from_shape_fn((b, od), |_| rng.gen_range(-1.0..1.0));
        let mut actions = Array2::zeros((b, policy.sigma.len()));
        let mut logp_old = Vec::new();
        for i in 0..b {
            let (a, lp) = policy.sample_action(obs.row(i).as_slice().unwrap(), &mut rng).unwrap();
            actions.row_mut(i).assign(&ndarray::Array1::from(a));
            logp_old.push(lp);
        }
        Minibatch {
            obs,
            actions,
            logp_old,
            advantages: (0..b).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            returns: (0..b).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    fn tiny_nets(seed: u64) -> (GaussianPolicy, Mlp) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Mlp::orthogonal(&[5, 6, 6, 3], 2f64.sqrt(), 0.5, &mut rng).unwrap();
        let v = Mlp::orthogonal(&[5, 6, 6, 1], 2f64.sqrt(), 1.0, &mut rng).unwrap();
        (GaussianPolicy::new(p, vec![0.4; 3]).unwrap(), v)
    }

    #[test]
    fn surrogate_at_old_parameters() {
        let (pol, val) = tiny_nets(1);
        let mb = synthetic_minibatch(&pol, 2, 32);
        let out = ppo_loss(&pol, &val, &mb, 0.2, 0.5, 0.0).unwrap();
        let mean_adv = mb.advantages.iter().sum::<f64>() / 32.0;
        assert_abs_diff_eq!(out.policy_loss, -mean_adv, epsilon = 1e-12);
        assert_eq!(out.clip_frac, 0.0);
        assert!(out.approx_kl.abs() < 1e-20);

        // gradient equals the vanilla estimator -mean(A grad log pi)
        let b = 32;
        let mut up = Array2::zeros((b, 3));
        let cache = pol.net.forward_cached(mb.obs.view()).unwrap();
        for i in 0..b {
            for d in 0..3 {
                up[(i, d)] = -mb.advantages[i] * (mb.actions[(i, d)] - cache.output()[(i, d)]) / (0.16 * b as f64);
            }
        }
        let vanilla = pol.net.backward(&cache, up.view()).unwrap();
        for (a, v) in out.grad_policy.iter().zip(&vanilla) {
            assert_abs_diff_eq!(a, v, epsilon = 1e-14);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let (pol, val) = tiny_nets(3);
        let mb = synthetic_minibatch(&pol, 4, 16);
        // move the policy away from the sampling policy so some ratios clip
        let mut moved = pol.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        moved.net.params_mut().iter_mut().for_each(|p| *p += rng.gen_range(-0.05..0.05));
        let out = ppo_loss(&moved, &val, &mb, 0.2, 0.5, 0.0).unwrap();
        let h = 1e-6;
        for k in 0..moved.net.n_params() {
            let mut p = moved.clone();
            p.net.params_mut()[k] += h;
            let fp = ppo_loss(&p, &val, &mb, 0.2, 0.5, 0.0).unwrap().loss;
            p.net.params_mut()[k] -= 2.0 * h;
            let fm = ppo_loss(&p, &val, &mb, 0.2, 0.5, 0.0).unwrap().loss;
            let fd = (fp - fm) / (2.0 * h);
            let scale = fd.abs().max(out.grad_policy[k].abs()).max(1e-4);
            assert!((fd - out.grad_policy[k]).abs() / scale < 1e-5, "policy param {k}: {fd} vs {}", out.grad_policy[k]);
        }
        for k in 0..val.n_params() {
            let mut v = val.clone();
            v.params_mut()[k] += h;
            let fp = ppo_loss(&moved, &v, &mb, 0.2, 0.5, 0.0).unwrap().loss;
            v.params_mut()[k] -= 2.0 * h;
            let fm = ppo_loss(&moved, &v, &mb, 0.2, 0.5, 0.0).unwrap().loss;
            let fd = (fp - fm) / (2.0 * h);
            let scale = fd.abs().max(out.grad_value[k].abs()).max(1e-4);
            assert!((fd - out.grad_value[k]).abs() / scale < 1e-5, "value param {k}");
        }
    }

    #[test]
    fn grad_norm_clipping() {
        let mut a = vec![3.0, 4.0];
        let mut b = vec![12.0];
        let pre = clip_grad_norm(&mut [&mut a, &mut b], 0.5);
        assert_abs_diff_eq!(pre, 13.0, epsilon = 1e-12);
        let post = (a.iter().chain(&b).map(|x| x * x).sum::<f64>()).sqrt();
        assert!(post <= 0.5 + 1e-12);
        let mut c = vec![0.1];
        assert_abs_diff_eq!(clip_grad_norm(&mut [&mut c], 0.5), 0.1);
        assert_eq!(c, vec![0.1]);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut tr = Trainer::new(env_cfg(10), small_ppo(), 4).unwrap();
            let mut log = Vec::new();
            tr.train(|_, s| log.push(s.csv_row()), |_| {}).unwrap();
            (tr.policy.net.params().to_vec(), tr.value.params().to_vec(), log)
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.2.len(), 3);
    }

    #[test]
    fn zero_updates_leave_initial_networks() {
        let cfg = PpoConfig {
            total_updates: 0,
            ..small_ppo()
        };
        let mut tr = Trainer::new(env_cfg(10), cfg, 4).unwrap();
        let before = tr.policy.clone();
        let mut n = 0;
        tr.train(|_, _| n += 1, |_| {}).unwrap();
        assert_eq!(n, 0);
        assert_eq!(tr.policy, before);
    }

    #[test]
    fn evaluation_basics() {
        let cfg = env_cfg(20);
        let pol = GaussianPolicy::new(Mlp::zeros(&[32, 4, 2]).unwrap(), vec![0.4, 0.4]).unwrap();
        let empty = evaluate(&pol, &cfg, &EvalOptions::default()).unwrap();
        assert!(empty.final_fidelities.is_empty());

        let opts = EvalOptions {
            n_traj: 5,
            deterministic: true,
            seed: 3,
            keep_trajectories: 2,
            snapshot_steps: vec![0, 20],
        };
        let rep = evaluate(&pol, &cfg, &opts).unwrap();
        // zero policy: vacuum is never displaced
        assert_eq!(rep.final_fidelities, vec![0.0; 5]);
        assert_eq!(rep.trajectories.len(), 2);
        assert_eq!(rep.trajectories[0].len(), 21);
        assert_eq!(rep.mean_populations.len(), 21);
        assert_eq!(rep.mean_states.len(), 2);
        let again = evaluate(&pol, &cfg, &opts).unwrap();
        assert_eq!(rep.final_fidelities, again.final_fidelities);
    }

    #[test]
    fn histogram_bins() {
        let h = fidelity_histogram(&[0.0, 0.05, 0.5, 1.0], 10);
        assert_eq!(h.len(), 10);
        assert_eq!(h[0].2, 2);
        assert_eq!(h[5].2, 1);
        assert_eq!(h[9].2, 1);
    }
}
