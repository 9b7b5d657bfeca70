//! Run configuration: one JSON document with `env`, `ppo`, `integrator`,
//! `channels`, `noise` and `baseline` sections.
//!
//! Times are measured in units of the episode length, so `channels.gamma_meas`
//! is the product `gamma_meas * T_max` and `env.beta_max` is
//! `beta_max * T_max`.

use std::path::Path;

use fock_core::env::EnvConfig;
use fock_core::sme::{ChannelConfig, EfficiencyMode, IntegratorConfig, NoiseConfig};
use fock_core::{TargetComponent, TargetSpec};
use fock_rl::PpoConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    /// Fock cutoff.
    pub n: usize,
    pub n_max: usize,
    pub beta_max: f64,
    pub theta: f64,
    pub target: Vec<TargetComponent>,
    pub control_channels: bool,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            n: 10,
            n_max: 1000,
            beta_max: 20.0,
            theta: 8.0,
            target: vec![TargetComponent { n: 1, re: 1.0, im: 0.0 }],
            control_channels: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    /// Greedy candidate lattice is `greedy_grid x greedy_grid`.
    pub greedy_grid: usize,
    pub greedy_runs: usize,
    pub strong_cutoff: usize,
    pub strong_max_iters: usize,
    pub strong_runs: usize,
    pub strong_targets: Vec<usize>,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            greedy_grid: 21,
            greedy_runs: 20,
            strong_cutoff: 70,
            strong_max_iters: 50,
            strong_runs: 5000,
            strong_targets: (1..=7).collect(),
        }
    }
}

fn default_channels() -> ChannelConfig {
    ChannelConfig {
        m: 10,
        gamma_meas: 400.0,
        efficiency_mode: EfficiencyMode::PurityPreserving,
    }
}

fn default_run_id() -> String {
    "run".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_run_id")]
    pub run_id: String,
    #[serde(default)]
    pub seed: u64,
    /// Output root; the `--out` flag and `FOCKCTL_OUT` take precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    /// Write an intermediate checkpoint every this many updates (0: final
    /// only).
    #[serde(default)]
    pub checkpoint_interval: usize,
    #[serde(default)]
    pub env: EnvSection,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default = "default_channels")]
    pub channels: ChannelConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub baseline: BaselineSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: default_run_id(),
            seed: 0,
            output_dir: None,
            checkpoint_interval: 0,
            env: EnvSection::default(),
            ppo: PpoConfig::default(),
            integrator: IntegratorConfig::default(),
            channels: default_channels(),
            noise: NoiseConfig::default(),
            baseline: BaselineSection::default(),
        }
    }
}

fn invalid(path: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{path}: {msg}"))
}

impl RunConfig {
    /// Parses JSON text layered over the defaults, applying `key.path=value`
    /// overrides first.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let given: Value = serde_json::from_str(text).map_err(|e| CliError::Config(format!("config is not valid JSON: {e}")))?;
        if !given.is_object() {
            return Err(CliError::Config("config must be a JSON object".into()));
        }
        let mut doc = serde_json::to_value(RunConfig::default()).expect("config serializes");
        merge(&mut doc, given);
        for ov in overrides {
            apply_override(&mut doc, ov)?;
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
            let path = e.path().to_string();
            invalid(&path, e.into_inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let e = &self.env;
        if e.n < 2 {
            return Err(invalid("env.n", "cutoff must be at least 2"));
        }
        if e.n_max == 0 {
            return Err(invalid("env.n_max", "must be >= 1"));
        }
        if !(e.beta_max >= 0.0) || !e.beta_max.is_finite() {
            return Err(invalid("env.beta_max", "must be a finite number >= 0"));
        }
        if !(e.theta >= 1.0) {
            return Err(invalid("env.theta", "must be >= 1"));
        }
        if e.target.is_empty() {
            return Err(invalid("env.target", "needs at least one component"));
        }
        TargetSpec::from_components(&e.target, e.n).map_err(|err| invalid("env.target", err))?;
        if self.channels.m > e.n {
            return Err(invalid("channels.m", format!("{} exceeds cutoff env.n = {}", self.channels.m, e.n)));
        }
        if !(self.channels.gamma_meas >= 0.0) || !self.channels.gamma_meas.is_finite() {
            return Err(invalid("channels.gamma_meas", "must be a finite number >= 0"));
        }
        for (path, v) in [("noise.gamma_decay", self.noise.gamma_decay), ("noise.gamma_dephasing", self.noise.gamma_dephasing)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(path, "must be a finite number >= 0"));
            }
        }
        if self.integrator.n_sub == 0 {
            return Err(invalid("integrator.n_sub", "must be >= 1"));
        }
        self.ppo.validate().map_err(|err| CliError::Config(err.to_string().replace("invalid configuration: ", "")))?;
        let b = &self.baseline;
        if b.greedy_grid == 0 {
            return Err(invalid("baseline.greedy_grid", "must be >= 1"));
        }
        if b.strong_cutoff < 2 {
            return Err(invalid("baseline.strong_cutoff", "must be >= 2"));
        }
        if let Some(&l) = b.strong_targets.iter().find(|&&l| l >= b.strong_cutoff) {
            return Err(invalid("baseline.strong_targets", format!("target {l} not below cutoff {}", b.strong_cutoff)));
        }
        Ok(())
    }

    pub fn env_config(&self) -> Result<EnvConfig, CliError> {
        let target = TargetSpec::from_components(&self.env.target, self.env.n).map_err(|err| invalid("env.target", err))?;
        Ok(EnvConfig {
            n: self.env.n,
            n_max: self.env.n_max,
            t_max: 1.0,
            beta_mult: self.env.beta_max,
            theta: self.env.theta,
            target,
            channels: self.channels.clone(),
            noise: self.noise.clone(),
            integ: self.integrator.clone(),
            control_channels: self.env.control_channels,
        })
    }

    /// Canonical serialization written next to every run.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical form with the output location removed.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Recursively overlays `patch` onto `base`; non-object values replace.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets `a.b.c=value` inside a JSON document; the value is parsed as JSON
/// when possible and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not of the form path=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    set_path(doc, path, value)
}

pub fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<(), CliError> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("override path `{path}` is malformed")));
    }
    let mut cur = doc;
    for (i, key) in keys.iter().enumerate() {
        let map = cur
            .as_object_mut()
            .ok_or_else(|| invalid(&keys[..i].join("."), "is not an object"))?;
        if i + 1 == keys.len() {
            map.insert(key.to_string(), value);
            return Ok(());
        }
        cur = map.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("path has at least one key")
}
