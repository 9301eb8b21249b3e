//! Clipped-surrogate policy optimization with generalized advantage estimation.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;

use super::net::{batch, PolicyNet};
use super::{entropy, log_prob, Agent, OptimConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub input: Vec<f64>,
    /// Raw (pre-squash) action.
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
}

/// Policy-active steps of one episode. The last step is terminal.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Episode {
    pub steps: Vec<Step>,
}

impl Episode {
    /// Credit reward earned while the policy was idle to its latest step.
    pub fn add_reward(&mut self, r: f64) -> bool {
        match self.steps.last_mut() {
            Some(s) => {
                s.reward += r;
                true
            }
            None => false,
        }
    }

    /// Discounted return from the first step.
    pub fn discounted_return(&self, gamma: f64) -> f64 {
        self.steps.iter().rev().fold(0.0, |acc, s| s.reward + gamma * acc)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBuffer {
    pub episodes: Vec<Episode>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.episodes.iter().map(|e| e.steps.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, episode: Episode) {
        if !episode.steps.is_empty() {
            self.episodes.push(episode);
        }
    }

    pub fn clear(&mut self) {
        self.episodes.clear();
    }
}

/// GAE over one trajectory. `dones[t]` cuts bootstrapping from `t + 1`;
/// `last_value` bootstraps the final step when it is not done.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if n == 0 {
        return Err(Error::Usage("advantage estimation on an empty buffer".into()));
    }
    if values.len() != n || dones.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: values.len().min(dones.len()),
        });
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = last_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        adv[t] = delta + gamma * lambda * live * next_adv;
        next_adv = adv[t];
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    if adv.is_empty() {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for a in adv.iter_mut() {
        *a = (*a - mean) / std;
    }
}

/// Adam with bias correction over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Apply one step, leaving parameters where `frozen` is true untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], frozen: impl Fn(usize) -> bool) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            if frozen(i) {
                continue;
            }
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub samples: usize,
    pub actor_frozen: bool,
}

/// One flattened sample of the update batch.
#[derive(Debug, Clone)]
pub struct Sample<'a> {
    pub input: &'a [f64],
    pub action: &'a [f64],
    pub old_log_prob: f64,
    pub advantage: f64,
    pub ret: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Minibatch loss `L_clip + c_v L_value - c_e H` and its gradient.
/// With `freeze_actor` the policy terms are dropped from the gradient.
pub fn loss_and_grad(
    net: &PolicyNet,
    samples: &[Sample<'_>],
    config: &OptimConfig,
    freeze_actor: bool,
) -> Result<(LossParts, Vec<f64>)> {
    let b = samples.len();
    let bf = b as f64;
    let d = net.shape.action;
    let inputs: Vec<&[f64]> = samples.iter().map(|s| s.input).collect();
    let fwd = net.forward(batch(&inputs))?;
    let log_std: Vec<f64> = net.log_std().to_vec();
    let sigma2: Vec<f64> = log_std.iter().map(|l| (2.0 * l).exp()).collect();

    let mut d_mean = Array2::zeros((b, d));
    let mut d_value = Array1::zeros(b);
    let mut d_log_std = Array1::zeros(d);
    let mut parts = LossParts::default();
    let eps = config.clip_ratio;

    for (i, s) in samples.iter().enumerate() {
        let mean = fwd.mean.row(i);
        let mean_s = mean.as_slice().expect("row-major");
        let lp = log_prob(s.action, mean_s, &log_std);
        let ratio = (lp - s.old_log_prob).exp();
        let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
        let surr = (ratio * s.advantage).min(clipped * s.advantage);
        parts.policy -= surr / bf;
        parts.approx_kl += (s.old_log_prob - lp) / bf;
        if (ratio - 1.0).abs() > eps {
            parts.clip_fraction += 1.0 / bf;
        }
        // Only the unclipped branch depends on the parameters.
        let active = ratio * s.advantage <= clipped * s.advantage;
        let g_lp = if active { -s.advantage * ratio / bf } else { 0.0 };
        for k in 0..d {
            let diff = s.action[k] - mean_s[k];
            d_mean[(i, k)] = g_lp * diff / sigma2[k];
            d_log_std[k] += g_lp * (diff * diff / sigma2[k] - 1.0);
        }
        let err = fwd.value[i] - s.ret;
        parts.value += err * err / bf;
        d_value[i] = config.value_coef * 2.0 * err / bf;
    }
    parts.entropy = entropy(&log_std);
    for k in 0..d {
        d_log_std[k] -= config.entropy_coef;
    }
    parts.total = parts.policy + config.value_coef * parts.value - config.entropy_coef * parts.entropy;
    if !parts.total.is_finite() {
        return Err(Error::Optimizer(format!("non-finite loss {}", parts.total)));
    }
    if freeze_actor {
        d_mean.fill(0.0);
        d_log_std.fill(0.0);
    }
    Ok((parts, net.backward(&fwd, &d_mean, &d_value, &d_log_std)))
}

fn clip_grad_norm(g: &mut [f64], max_norm: f64) {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        g.iter_mut().for_each(|x| *x *= s);
    }
}

pub(crate) fn update<R: Rng + ?Sized>(
    agent: &mut Agent,
    buffer: &RolloutBuffer,
    episode_count: u64,
    rng: &mut R,
) -> Result<UpdateStats> {
    if buffer.is_empty() {
        return Err(Error::Usage("update called with an empty rollout buffer".into()));
    }
    let config = agent.config.clone();
    let mut advantages = Vec::with_capacity(buffer.len());
    let mut returns = Vec::with_capacity(buffer.len());
    for ep in &buffer.episodes {
        let r: Vec<f64> = ep.steps.iter().map(|s| s.reward).collect();
        let v: Vec<f64> = ep.steps.iter().map(|s| s.value).collect();
        let mut dones = vec![false; r.len()];
        *dones.last_mut().expect("non-empty") = true;
        let (a, ret) = compute_gae(&r, &v, &dones, 0.0, config.gamma, config.gae_lambda)?;
        advantages.extend(a);
        returns.extend(ret);
    }
    normalize_advantages(&mut advantages);

    let samples: Vec<Sample<'_>> = buffer
        .episodes
        .iter()
        .flat_map(|e| e.steps.iter())
        .zip(advantages.iter().zip(&returns))
        .map(|(s, (a, r))| Sample {
            input: &s.input,
            action: &s.action,
            old_log_prob: s.log_prob,
            advantage: *a,
            ret: *r,
        })
        .collect();

    let freeze = episode_count < config.critic_warmup_episodes;
    let actor = agent.net.layout.actor_range();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut stats = UpdateStats {
        samples: samples.len(),
        actor_frozen: freeze,
        ..Default::default()
    };
    let mut batches = 0usize;
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.minibatch) {
            let mb: Vec<Sample<'_>> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let (parts, mut grad) = loss_and_grad(&agent.net, &mb, &config, freeze)?;
            clip_grad_norm(&mut grad, config.max_grad_norm);
            agent.adam.step(&mut agent.net.params, &grad, |i| freeze && actor.contains(&i));
            stats.policy_loss += parts.policy;
            stats.value_loss += parts.value;
            stats.approx_kl += parts.approx_kl;
            stats.clip_fraction += parts.clip_fraction;
            stats.entropy = parts.entropy;
            batches += 1;
        }
    }
    let nb = batches as f64;
    stats.policy_loss /= nb;
    stats.value_loss /= nb;
    stats.approx_kl /= nb;
    stats.clip_fraction /= nb;
    if agent.net.params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Optimizer("parameters became non-finite".into()));
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::net::NetShape;
    use crate::policy::sample_action;
    use crate::rng::{stream, Purpose};
    use rand_distr::StandardNormal;

    /// Direct evaluation of the GAE sum `A_t = sum_l (gamma lambda)^l delta_{t+l}`,
    /// truncated at the first terminal step.
    fn brute_gae(r: &[f64], v: &[f64], dones: &[bool], last: f64, g: f64, l: f64) -> Vec<f64> {
        let n = r.len();
        let value_at = |i: usize| if i < n { v[i] } else { last };
        (0..n)
            .map(|t| {
                let mut total = 0.0;
                for k in t..n {
                    let next = if dones[k] { 0.0 } else { value_at(k + 1) };
                    let delta = r[k] + g * next - v[k];
                    total += (g * l).powi((k - t) as i32) * delta;
                    if dones[k] {
                        break;
                    }
                }
                total
            })
            .collect()
    }

    #[test]
    fn gae_single_terminal() {
        let (a, ret) = compute_gae(&[1.0], &[0.3], &[true], 5.0, 0.99, 0.95).unwrap();
        assert!((a[0] - 0.7).abs() < 1e-15);
        assert!((ret[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gae_monte_carlo_limit() {
        let r = [0.5, -1.0, 2.0, 0.25];
        let v = [0.1, 0.4, -0.3, 0.9];
        let (a, _) = compute_gae(&r, &v, &[false; 4], 0.0, 1.0, 1.0).unwrap();
        for t in 0..4 {
            let mc: f64 = r[t..].iter().sum();
            assert!((a[t] - (mc - v[t])).abs() < 1e-12);
        }
    }

    #[test]
    fn gae_matches_brute_force() {
        let mut rng = stream(4, 0, Purpose::Diagnostic);
        for _ in 0..50 {
            let r: Vec<f64> = (0..20).map(|_| rng.sample(StandardNormal)).collect();
            let v: Vec<f64> = (0..20).map(|_| rng.sample(StandardNormal)).collect();
            let dones: Vec<bool> = (0..20).map(|_| rng.random_bool(0.15)).collect();
            let last: f64 = rng.sample(StandardNormal);
            let (a, _) = compute_gae(&r, &v, &dones, last, 0.99, 0.95).unwrap();
            let b = brute_gae(&r, &v, &dones, last, 0.99, 0.95);
            for t in 0..20 {
                assert!((a[t] - b[t]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gae_empty_is_usage_error() {
        assert!(matches!(compute_gae(&[], &[], &[], 0.0, 0.99, 0.95), Err(Error::Usage(_))));
    }

    #[test]
    fn normalization_moments() {
        let mut rng = stream(5, 0, Purpose::Diagnostic);
        let mut a: Vec<f64> = (0..257).map(|_| 3.0 + 7.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        normalize_advantages(&mut a);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-10);
        assert!((std - 1.0).abs() < 1e-6);
        let mut flat = vec![2.0; 5];
        normalize_advantages(&mut flat);
        assert!(flat.iter().all(|x| *x == 0.0));
    }

    fn toy_agent(seed: u64) -> Agent {
        let mut rng = stream(seed, 0, Purpose::Policy);
        let config = OptimConfig {
            hidden: 4,
            window: 1,
            minibatch: 8,
            ..OptimConfig::default()
        };
        let mut agent = Agent::new(2, config, &mut rng).unwrap();
        for i in agent.net.layout.actor_range() {
            agent.net.params[i] += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
        agent
    }

    fn toy_buffer(agent: &Agent, seed: u64, steps: usize) -> RolloutBuffer {
        let mut rng = stream(seed, 0, Purpose::Sampling);
        let mut ep = Episode::default();
        for t in 0..steps {
            let input: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
            let (a, lp, v) = agent.act(&input, &mut rng).unwrap();
            // Perturb the stored log-prob so ratios land on both sides of the clip.
            let lp = lp + 0.3 * rng.sample::<f64, _>(StandardNormal);
            ep.steps.push(Step {
                input,
                action: a,
                log_prob: lp,
                value: v,
                reward: if t % 3 == 0 { 1.0 } else { 0.0 },
            });
        }
        RolloutBuffer { episodes: vec![ep] }
    }

    fn samples_of(buf: &RolloutBuffer, config: &OptimConfig) -> (Vec<f64>, Vec<f64>) {
        let ep = &buf.episodes[0];
        let r: Vec<f64> = ep.steps.iter().map(|s| s.reward).collect();
        let v: Vec<f64> = ep.steps.iter().map(|s| s.value).collect();
        let mut dones = vec![false; r.len()];
        *dones.last_mut().unwrap() = true;
        let (mut a, ret) = compute_gae(&r, &v, &dones, 0.0, config.gamma, config.gae_lambda).unwrap();
        normalize_advantages(&mut a);
        (a, ret)
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut agent = toy_agent(11);
        agent.config.entropy_coef = 0.01;
        let buf = toy_buffer(&agent, 12, 8);
        let (adv, ret) = samples_of(&buf, &agent.config);
        let samples: Vec<Sample<'_>> = buf.episodes[0]
            .steps
            .iter()
            .zip(adv.iter().zip(&ret))
            .map(|(s, (a, r))| Sample {
                input: &s.input,
                action: &s.action,
                old_log_prob: s.log_prob,
                advantage: *a,
                ret: *r,
            })
            .collect();
        let (_, g) = loss_and_grad(&agent.net, &samples, &agent.config, false).unwrap();
        let h = 1e-6;
        let mut checked = 0;
        for i in 0..agent.net.params.len() {
            let mut plus = agent.net.clone();
            plus.params[i] += h;
            let mut minus = agent.net.clone();
            minus.params[i] -= h;
            let lp = loss_and_grad(&plus, &samples, &agent.config, false).unwrap().0.total;
            let lm = loss_and_grad(&minus, &samples, &agent.config, false).unwrap().0.total;
            let fd = (lp - lm) / (2.0 * h);
            let scale = fd.abs().max(g[i].abs());
            if scale > 1e-7 {
                assert!((fd - g[i]).abs() / scale < 1e-4, "param {i}: fd {fd} vs {}", g[i]);
                checked += 1;
            }
        }
        assert!(checked > agent.net.params.len() / 2);
    }

    #[test]
    fn warmup_freezes_actor_bitwise() {
        let mut agent = toy_agent(13);
        let buf = toy_buffer(&agent, 14, 40);
        let before = agent.net.actor_params().to_vec();
        let critic_before = agent.net.params[agent.net.layout.actor_range().end..].to_vec();
        let mut rng = stream(1, 0, Purpose::Shuffle);
        let stats = agent.update(&buf, 10, &mut rng).unwrap();
        assert!(stats.actor_frozen);
        assert_eq!(agent.net.actor_params(), &before[..]);
        assert_ne!(&agent.net.params[agent.net.layout.actor_range().end..], &critic_before[..]);

        agent.update(&buf, 60, &mut rng).unwrap();
        assert_ne!(agent.net.actor_params(), &before[..]);
    }

    #[test]
    fn zero_advantage_leaves_actor() {
        let agent = toy_agent(15);
        let buf = toy_buffer(&agent, 16, 16);
        let samples: Vec<Sample<'_>> = buf.episodes[0]
            .steps
            .iter()
            .map(|s| Sample {
                input: &s.input,
                action: &s.action,
                old_log_prob: s.log_prob,
                advantage: 0.0,
                ret: 1.0,
            })
            .collect();
        let (_, g) = loss_and_grad(&agent.net, &samples, &agent.config, false).unwrap();
        let mut net = agent.net.clone();
        let before = net.actor_params().to_vec();
        let mut adam = Adam::new(net.params.len(), 3e-4, 1e-5);
        adam.step(&mut net.params, &g, |_| false);
        for (a, b) in net.actor_params().iter().zip(&before) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bandit_mean_converges() {
        // One-step episodes on a constant observation, reward -a^2.
        let mut rng = stream(17, 0, Purpose::Policy);
        let config = OptimConfig {
            hidden: 8,
            window: 1,
            critic_warmup_episodes: 0,
            learning_rate: 3e-3,
            ..OptimConfig::default()
        };
        let mut agent = Agent::new(1, config, &mut rng).unwrap();
        let bias = agent.net.layout.actor_range().start + NetShape { input: 6, hidden: 8, action: 1 }.hidden;
        agent.net.params[bias] = 1.0;
        let input = vec![0.5; 6];
        let mut sampling = stream(17, 0, Purpose::Sampling);
        let mut shuffle = stream(17, 0, Purpose::Shuffle);
        let mut converged_at = None;
        for u in 0..200 {
            let mut buf = RolloutBuffer::default();
            for _ in 0..64 {
                let (mean, value) = agent.net.forward_one(&input).unwrap();
                let (a, lp) = sample_action(&mean, &agent.net.log_std().to_vec(), &mut sampling);
                buf.push(Episode {
                    steps: vec![Step {
                        reward: -a[0] * a[0],
                        input: input.clone(),
                        action: a,
                        log_prob: lp,
                        value,
                    }],
                });
            }
            agent.update(&buf, u64::MAX, &mut shuffle).unwrap();
            let mean = agent.act_mean(&input).unwrap()[0];
            if mean.abs() < 0.05 {
                converged_at = Some(u);
                break;
            }
        }
        assert!(converged_at.is_some());
    }

    #[test]
    fn empty_buffer_is_usage_error() {
        let mut agent = toy_agent(18);
        let mut rng = stream(1, 0, Purpose::Shuffle);
        assert!(matches!(agent.update(&RolloutBuffer::default(), 0, &mut rng), Err(Error::Usage(_))));
    }

    #[test]
    fn idle_reward_credited_to_last_step() {
        let mut ep = Episode::default();
        assert!(!ep.add_reward(1.0));
        ep.steps.push(Step {
            input: vec![],
            action: vec![],
            log_prob: 0.0,
            value: 0.0,
            reward: 0.0,
        });
        assert!(ep.add_reward(1.0));
        assert_eq!(ep.discounted_return(0.9), 1.0);
    }
}
