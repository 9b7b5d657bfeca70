//! Serializable snapshot of trained networks and optimizer state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{AdamState, GaussianPolicy, Mlp};
use crate::ppo::Trainer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub policy_sizes: Vec<usize>,
    pub value_sizes: Vec<usize>,
    pub hidden_activation: String,
    pub output_activation: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Row-major `fan_in x fan_out`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub layers: Vec<LayerParams>,
}

impl NetParams {
    pub fn from_mlp(net: &Mlp) -> Self {
        let sizes = net.sizes();
        let layers = (0..net.n_layers())
            .map(|l| {
                let (w, b) = net.layer_params(l);
                LayerParams {
                    fan_in: sizes[l],
                    fan_out: sizes[l + 1],
                    weight: w.to_vec(),
                    bias: b.to_vec(),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn to_mlp(&self, sizes: &[usize]) -> Result<Mlp> {
        let mut net = Mlp::zeros(sizes)?;
        if self.layers.len() != net.n_layers() {
            return Err(Error::Architecture(format!(
                "checkpoint has {} layers, architecture expects {}",
                self.layers.len(),
                net.n_layers()
            )));
        }
        let mut flat = Vec::with_capacity(net.n_params());
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.fan_in != sizes[l]
                || layer.fan_out != sizes[l + 1]
                || layer.weight.len() != layer.fan_in * layer.fan_out
                || layer.bias.len() != layer.fan_out
            {
                return Err(Error::Architecture(format!("layer {l} does not match sizes {sizes:?}")));
            }
            flat.extend_from_slice(&layer.weight);
            flat.extend_from_slice(&layer.bias);
        }
        net.set_params(&flat)?;
        Ok(net)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub arch: Arch,
    pub policy: NetParams,
    pub value: NetParams,
    pub sigma: Vec<f64>,
    pub adam_policy: AdamState,
    pub adam_value: AdamState,
    pub config_hash: String,
    pub seed: u64,
}

impl Checkpoint {
    pub fn from_trainer(tr: &Trainer, config_hash: &str) -> Self {
        Self {
            arch: Arch {
                policy_sizes: tr.policy.net.sizes().to_vec(),
                value_sizes: tr.value.sizes().to_vec(),
                hidden_activation: "tanh".into(),
                output_activation: "linear".into(),
            },
            policy: NetParams::from_mlp(&tr.policy.net),
            value: NetParams::from_mlp(&tr.value),
            sigma: tr.policy.sigma.clone(),
            adam_policy: tr.adam_policy.clone(),
            adam_value: tr.adam_value.clone(),
            config_hash: config_hash.to_string(),
            seed: tr.seed,
        }
    }

    pub fn policy(&self) -> Result<GaussianPolicy> {
        self.check_activations()?;
        GaussianPolicy::new(self.policy.to_mlp(&self.arch.policy_sizes)?, self.sigma.clone())
    }

    pub fn value_net(&self) -> Result<Mlp> {
        self.check_activations()?;
        self.value.to_mlp(&self.arch.value_sizes)
    }

    fn check_activations(&self) -> Result<()> {
        if self.arch.hidden_activation != "tanh" || self.arch.output_activation != "linear" {
            return Err(Error::Architecture(format!(
                "unsupported activations {}/{}",
                self.arch.hidden_activation, self.arch.output_activation
            )));
        }
        Ok(())
    }

    /// Restores networks and optimizer state into a freshly built trainer.
    pub fn restore_into(&self, tr: &mut Trainer) -> Result<()> {
        let policy = self.policy()?;
        let value = self.value_net()?;
        if policy.net.sizes() != tr.policy.net.sizes() || value.sizes() != tr.value.sizes() {
            return Err(Error::Architecture("checkpoint does not match the configured networks".into()));
        }
        tr.policy = policy;
        tr.value = value;
        tr.adam_policy = self.adam_policy.clone();
        tr.adam_value = self.adam_value.clone();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn net_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::orthogonal(&[4, 6, 3], 1.3, 0.2, &mut rng).unwrap();
        let back = NetParams::from_mlp(&net).to_mlp(&[4, 6, 3]).unwrap();
        assert_eq!(net, back);
        assert!(NetParams::from_mlp(&net).to_mlp(&[4, 5, 3]).is_err());
    }
}
