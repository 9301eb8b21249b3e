//! Gaussian actor-critic policy and its on-policy optimizer.

mod checkpoint;
mod net;
mod ppo;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use net::{batch, orthogonal, Forward, Layout, NetShape, PolicyNet};
pub use ppo::{compute_gae, loss_and_grad, normalize_advantages, Adam, Episode, LossParts, RolloutBuffer, Sample, Step, UpdateStats};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{Observation, OBS_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_ratio: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub learning_rate: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub critic_warmup_episodes: u64,
    pub hidden: usize,
    /// Observation frames stacked into the network input.
    pub window: usize,
    pub log_std_init: f64,
    pub adam_eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_ratio: 0.2,
            epochs: 10,
            minibatch: 64,
            learning_rate: 3e-4,
            entropy_coef: 0.0,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            critic_warmup_episodes: 50,
            hidden: 64,
            window: 4,
            log_std_init: -0.5,
            adam_eps: 1e-5,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x <= 1.0;
        if !unit(self.gamma) || !unit(self.gae_lambda) {
            return Err(Error::Config("gamma and gae_lambda must lie in (0, 1]".into()));
        }
        if !(self.clip_ratio > 0.0 && self.learning_rate > 0.0 && self.max_grad_norm > 0.0) {
            return Err(Error::Config("clip_ratio, learning_rate and max_grad_norm must be > 0".into()));
        }
        if !(self.entropy_coef >= 0.0 && self.value_coef >= 0.0 && self.adam_eps > 0.0) {
            return Err(Error::Config("optimizer coefficients must be >= 0".into()));
        }
        if self.epochs == 0 || self.minibatch == 0 || self.hidden == 0 || self.window == 0 {
            return Err(Error::Config("epochs, minibatch, hidden and window must be >= 1".into()));
        }
        if !self.log_std_init.is_finite() {
            return Err(Error::Config("log_std_init must be finite".into()));
        }
        Ok(())
    }
}

/// Fixed per-component input scaling applied before the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObsScale {
    pub position: f64,
    pub heading: f64,
    pub force: f64,
    pub moment: f64,
}

impl Default for ObsScale {
    fn default() -> Self {
        Self {
            position: 0.01,
            heading: 0.1,
            force: 10.0,
            moment: 1.0,
        }
    }
}

impl ObsScale {
    pub fn apply(&self, obs: &Observation) -> [f64; OBS_DIM] {
        let a = obs.to_array();
        [
            a[0] / self.position,
            a[1] / self.position,
            a[2] / self.heading,
            a[3] / self.force,
            a[4] / self.force,
            a[5] / self.moment,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if [self.position, self.heading, self.force, self.moment].iter().all(|x| x.is_finite() && *x > 0.0) {
            Ok(())
        } else {
            Err(Error::Config("observation scales must be > 0".into()))
        }
    }
}

/// The last `frames` scaled observations, oldest first, zero-padded.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsWindow {
    frames: usize,
    data: Vec<f64>,
}

impl ObsWindow {
    pub fn new(frames: usize) -> Self {
        Self {
            frames,
            data: vec![0.0; frames * OBS_DIM],
        }
    }

    pub fn clear(&mut self) {
        self.data.fill(0.0);
    }

    pub fn push(&mut self, frame: &[f64; OBS_DIM]) {
        self.data.rotate_left(OBS_DIM);
        let n = self.data.len();
        self.data[n - OBS_DIM..].copy_from_slice(frame);
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn frames(&self) -> usize {
        self.frames
    }
}

const LOG_2PI: f64 = 1.837_877_066_409_345_5; // ln(2 pi)

/// Diagonal Gaussian log-density.
pub fn log_prob(action: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    action
        .iter()
        .zip(mean)
        .zip(log_std)
        .map(|((a, m), ls)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * LOG_2PI
        })
        .sum()
}

/// Draw from `N(mean, diag(exp(log_std))^2)` and return the exact log-density.
pub fn sample_action<R: Rng + ?Sized>(mean: &[f64], log_std: &[f64], rng: &mut R) -> (Vec<f64>, f64) {
    let a: Vec<f64> = mean
        .iter()
        .zip(log_std)
        .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let lp = log_prob(&a, mean, log_std);
    (a, lp)
}

/// Entropy of a diagonal Gaussian.
pub fn entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| ls + 0.5 * (1.0 + LOG_2PI)).sum()
}

/// Policy, value function and optimizer state.
#[derive(Debug, Clone)]
pub struct Agent {
    pub net: PolicyNet,
    pub adam: Adam,
    pub config: OptimConfig,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(action_dim: usize, config: OptimConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let shape = NetShape {
            input: config.window * OBS_DIM,
            hidden: config.hidden,
            action: action_dim,
        };
        let net = PolicyNet::new(shape, config.log_std_init, rng);
        let adam = Adam::new(net.params.len(), config.learning_rate, config.adam_eps);
        Ok(Self { net, adam, config })
    }

    /// Sampled raw action, its log-probability and the value estimate.
    pub fn act<R: Rng + ?Sized>(&self, input: &[f64], rng: &mut R) -> Result<(Vec<f64>, f64, f64)> {
        let (mean, value) = self.net.forward_one(input)?;
        let log_std: Vec<f64> = self.net.log_std().to_vec();
        let (a, lp) = sample_action(&mean, &log_std, rng);
        Ok((a, lp, value))
    }

    /// Deterministic action (the mean) for evaluation.
    pub fn act_mean(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.net.forward_one(input)?.0)
    }

    pub fn update<R: Rng + ?Sized>(&mut self, buffer: &RolloutBuffer, episode_count: u64, rng: &mut R) -> Result<UpdateStats> {
        ppo::update(self, buffer, episode_count, rng)
    }
}
