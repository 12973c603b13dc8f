//! Clipped-surrogate policy gradient with a Lagrangian cost penalty.
//!
//! Shared by the expert trainer (ground-truth cost) and the learner update of
//! constraint inference (learned cost). Rollouts only go through
//! [`BlackBoxEnv`]; the per-step cost comes from a caller-supplied
//! [`StepCost`].

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envs::BlackBoxEnv;
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, AdamConfig, DenseNet, ScaledNet, Standardizer, Trace};
use crate::policy::Policy;
use crate::rng;

/// Per-step cost signal used during training.
pub trait StepCost {
    fn cost(&self, state: &[f64], action: &[f64], next_state: &[f64]) -> f64;
}

impl<F> StepCost for F
where
    F: Fn(&[f64], &[f64], &[f64]) -> f64,
{
    fn cost(&self, state: &[f64], action: &[f64], next_state: &[f64]) -> f64 {
        self(state, action, next_state)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub hidden: Vec<usize>,
    pub episodes_per_epoch: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub update_passes: usize,
    pub minibatch_size: usize,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub max_grad_norm: f64,
    /// Stop the update passes of an epoch once the sampled KL exceeds this.
    pub target_kl: f64,
    pub std_start: f64,
    pub std_end: f64,
    pub lambda_init: f64,
    /// Dual ascent step on the multiplier.
    pub lambda_lr: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            episodes_per_epoch: 16,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            update_passes: 8,
            minibatch_size: 400,
            policy_lr: 3e-4,
            value_lr: 1e-3,
            max_grad_norm: 0.5,
            target_kl: 0.02,
            std_start: 0.6,
            std_end: 0.15,
            lambda_init: 0.0,
            lambda_lr: 0.05,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.episodes_per_epoch == 0 || self.update_passes == 0 || self.minibatch_size == 0 {
            return bad("episode, pass and minibatch counts must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gamma and gae_lambda must lie in [0, 1]");
        }
        if !(self.std_start > 0.0 && self.std_end > 0.0) {
            return bad("exploration std must be positive");
        }
        if self.policy_lr < 0.0 || self.value_lr < 0.0 || self.lambda_lr < 0.0 {
            return bad("learning rates must be non-negative");
        }
        if self.lambda_init < 0.0 {
            return bad("initial multiplier must be non-negative");
        }
        Ok(())
    }

    pub fn std_at(&self, epoch: usize, epochs: usize) -> f64 {
        if epochs <= 1 {
            return self.std_end;
        }
        let f = (epoch as f64 / (epochs - 1) as f64).min(1.0);
        self.std_start + (self.std_end - self.std_start) * f
    }
}

/// Nonnegative Lagrange multiplier on the episodic cost constraint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LagrangianState {
    pub lambda: f64,
    pub cost_limit: f64,
    pub multiplier_lr: f64,
}

impl LagrangianState {
    /// Projected dual ascent `lambda <- max(0, lambda + lr (cost - limit))`.
    pub fn update(&mut self, episodic_cost: f64) {
        self.lambda = (self.lambda + self.multiplier_lr * (episodic_cost - self.cost_limit)).max(0.0);
    }
}

/// Scalar state-value regressor.
pub(crate) fn value_net(input: Standardizer, hidden: &[usize], rng: &mut rng::Rng) -> Result<ScaledNet> {
    let mut sizes = vec![input.dim()];
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    let net = DenseNet::new(&sizes, Activation::Tanh, Activation::Identity, rng)?;
    ScaledNet::with_input_scaling(input, net)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub mean_return: f64,
    pub mean_cost: f64,
    /// Multiplier in force during the epoch (before its update).
    pub lambda: f64,
    pub lambda_after: f64,
    pub passes: usize,
}

/// Everything the trainer mutates across epochs.
#[derive(Clone, Debug)]
pub struct PpoLagrangian {
    pub config: PpoConfig,
    pub policy: Policy,
    pub value_r: ScaledNet,
    pub value_c: ScaledNet,
    pub lagrangian: LagrangianState,
    opt_pi: Adam,
    opt_vr: Adam,
    opt_vc: Adam,
    values_calibrated: bool,
}

struct Batch {
    states: Vec<Vec<f64>>,
    pre_squash: Vec<Vec<f64>>,
    old_mean: Vec<Vec<f64>>,
    adv: Vec<f64>,
    ret_r: Vec<f64>,
    ret_c: Vec<f64>,
    mean_return: f64,
    mean_cost: f64,
}

impl PpoLagrangian {
    pub fn new(config: PpoConfig, policy: Policy, cost_limit: f64, rng: &mut rng::Rng) -> Result<Self> {
        config.validate()?;
        let value_r = value_net(policy.model.input.clone(), &config.hidden, rng)?;
        let value_c = value_net(policy.model.input.clone(), &config.hidden, rng)?;
        let grad_clip = |lr| AdamConfig {
            max_grad_norm: Some(config.max_grad_norm),
            ..AdamConfig::with_lr(lr)
        };
        Ok(Self {
            opt_pi: Adam::for_net(grad_clip(config.policy_lr), &policy.model.net),
            opt_vr: Adam::for_net(grad_clip(config.value_lr), &value_r.net),
            opt_vc: Adam::for_net(grad_clip(config.value_lr), &value_c.net),
            lagrangian: LagrangianState {
                lambda: config.lambda_init,
                cost_limit,
                multiplier_lr: config.lambda_lr,
            },
            config,
            policy,
            value_r,
            value_c,
            values_calibrated: false,
        })
    }

    /// One epoch: gather `episodes_per_epoch` rollouts, update the policy and
    /// both value heads, then take a dual step. On a non-finite update the
    /// trainer is restored to its state before the epoch.
    pub fn epoch(
        &mut self,
        env: &BlackBoxEnv,
        cost: &dyn StepCost,
        exploration_std: f64,
        seed: u64,
    ) -> Result<EpochStats> {
        let snapshot = self.clone();
        match self.epoch_inner(env, cost, exploration_std, seed) {
            Ok(stats) => Ok(stats),
            Err(e) => {
                *self = snapshot;
                Err(e)
            }
        }
    }

    fn epoch_inner(
        &mut self,
        env: &BlackBoxEnv,
        cost: &dyn StepCost,
        exploration_std: f64,
        seed: u64,
    ) -> Result<EpochStats> {
        self.policy.exploration_std = exploration_std;
        let batch = self.collect(env, cost, seed)?;
        let lambda = self.lagrangian.lambda;
        let passes = self.update(&batch, seed)?;
        self.lagrangian.update(batch.mean_cost);
        Ok(EpochStats {
            mean_return: batch.mean_return,
            mean_cost: batch.mean_cost,
            lambda,
            lambda_after: self.lagrangian.lambda,
            passes,
        })
    }

    fn collect(&mut self, env: &BlackBoxEnv, cost: &dyn StepCost, seed: u64) -> Result<Batch> {
        let cfg = &self.config;
        let horizon = env.horizon();
        let n_eps = cfg.episodes_per_epoch;
        let sigma = self.policy.exploration_std;
        let mut states = Vec::with_capacity(n_eps * horizon);
        let mut pre_squash = Vec::with_capacity(n_eps * horizon);
        let mut old_mean = Vec::with_capacity(n_eps * horizon);
        let mut rewards_all = Vec::with_capacity(n_eps);
        let mut costs_all = Vec::with_capacity(n_eps);
        let mut finals = Vec::with_capacity(n_eps);
        let mut total_r = 0.0;
        let mut total_c = 0.0;
        for ep in 0..n_eps {
            let ep_seed = seed.wrapping_mul(1_000_003).wrapping_add(ep as u64);
            let mut noise = rng::derived(ep_seed, 0xac7);
            let mut state = env.reset(ep_seed);
            let mut rewards = Vec::with_capacity(horizon);
            let mut costs = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                let mean = self.policy.mean(&state)?;
                let u: Vec<f64> = mean
                    .iter()
                    .map(|m| m + sigma * noise.sample::<f64, _>(StandardNormal))
                    .collect();
                let mut action = self.policy.squash(&u);
                let (next, r) = env.step(&state, &mut action)?;
                let c = cost.cost(&state, &action, &next);
                if !c.is_finite() {
                    return Err(Error::NonFinite("step cost".into()));
                }
                rewards.push(r);
                costs.push(c);
                states.push(state);
                pre_squash.push(u);
                old_mean.push(mean);
                state = next;
            }
            total_r += rewards.iter().sum::<f64>();
            total_c += costs.iter().sum::<f64>();
            rewards_all.push(rewards);
            costs_all.push(costs);
            finals.push(state);
        }

        let (adv_r, ret_r) = self.advantages(&self.value_r, &states, &finals, &rewards_all, horizon)?;
        let (adv_c, ret_c) = self.advantages(&self.value_c, &states, &finals, &costs_all, horizon)?;
        if !self.values_calibrated {
            // Fix the value heads' output scale from the first batch of
            // returns so targets of very different magnitude train alike.
            self.value_r.output = output_scaler(&ret_r)?;
            self.value_c.output = output_scaler(&ret_c)?;
            self.values_calibrated = true;
        }
        let a_r = standardize(&adv_r, true);
        let a_c = standardize(&adv_c, false);
        let lambda = self.lagrangian.lambda;
        let adv = a_r
            .iter()
            .zip(&a_c)
            .map(|(r, c)| (r - lambda * c) / (1.0 + lambda))
            .collect();
        Ok(Batch {
            states,
            pre_squash,
            old_mean,
            adv,
            ret_r,
            ret_c,
            mean_return: total_r / n_eps as f64,
            mean_cost: total_c / n_eps as f64,
        })
    }

    /// GAE advantages and bootstrapped returns for episodes laid out
    /// contiguously in `states`.
    fn advantages(
        &self,
        value: &ScaledNet,
        states: &[Vec<f64>],
        finals: &[Vec<f64>],
        signal: &[Vec<f64>],
        horizon: usize,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let (gamma, lam) = (self.config.gamma, self.config.gae_lambda);
        let mut adv = vec![0.0; states.len()];
        let mut ret = vec![0.0; states.len()];
        for (ep, rewards) in signal.iter().enumerate() {
            let base = ep * horizon;
            let values: Vec<f64> = states[base..base + horizon]
                .iter()
                .map(|s| value.forward(s).map(|v| v[0]))
                .collect::<Result<_>>()?;
            let mut next_value = value.forward(&finals[ep])?[0];
            let mut gae = 0.0;
            for t in (0..horizon).rev() {
                let delta = rewards[t] + gamma * next_value - values[t];
                gae = delta + gamma * lam * gae;
                adv[base + t] = gae;
                ret[base + t] = gae + values[t];
                next_value = values[t];
            }
        }
        Ok((adv, ret))
    }

    fn update(&mut self, batch: &Batch, seed: u64) -> Result<usize> {
        let n = batch.states.len();
        let sigma = self.policy.exploration_std;
        let inv_var = 1.0 / (sigma * sigma);
        let clip = self.config.clip;
        let mb = self.config.minibatch_size.min(n);
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle = rng::derived(seed, 0x5f1);
        let mut trace = Trace::default();
        let mut passes = 0;
        for _ in 0..self.config.update_passes {
            passes += 1;
            for i in (1..n).rev() {
                let j = shuffle.random_range(0..=i);
                order.swap(i, j);
            }
            let mut kl_sum = 0.0;
            for chunk in order.chunks(mb) {
                let mut grad = vec![0.0; self.policy.model.net.param_count()];
                let scale = 1.0 / chunk.len() as f64;
                for &i in chunk {
                    self.policy.model.forward_trace(&batch.states[i], &mut trace);
                    let mean = trace.output().to_vec();
                    let u = &batch.pre_squash[i];
                    let old = &batch.old_mean[i];
                    let mut log_ratio = 0.0;
                    for k in 0..u.len() {
                        let dn = u[k] - mean[k];
                        let d_old = u[k] - old[k];
                        log_ratio += -0.5 * inv_var * (dn * dn - d_old * d_old);
                    }
                    kl_sum += -log_ratio;
                    let ratio = log_ratio.exp();
                    let a = batch.adv[i];
                    let active = (a >= 0.0 && ratio < 1.0 + clip) || (a < 0.0 && ratio > 1.0 - clip);
                    if !active {
                        continue;
                    }
                    let out_grad: Vec<f64> = u
                        .iter()
                        .zip(&mean)
                        .map(|(uk, mk)| -a * ratio * (uk - mk) * inv_var * scale)
                        .collect();
                    self.policy.model.net.backward(&trace, &out_grad, Some(&mut grad));
                }
                self.opt_pi.step(self.policy.model.net.weights_mut(), &grad)?;

                let xs: Vec<&[f64]> = chunk.iter().map(|&i| batch.states[i].as_slice()).collect();
                let tr: Vec<[f64; 1]> = chunk.iter().map(|&i| [batch.ret_r[i]]).collect();
                let tc: Vec<[f64; 1]> = chunk.iter().map(|&i| [batch.ret_c[i]]).collect();
                let tr: Vec<&[f64]> = tr.iter().map(|t| t.as_slice()).collect();
                let tc: Vec<&[f64]> = tc.iter().map(|t| t.as_slice()).collect();
                self.value_r.regression_step(&xs, &tr, &mut self.opt_vr)?;
                self.value_c.regression_step(&xs, &tc, &mut self.opt_vc)?;
            }
            if kl_sum / n as f64 > self.config.target_kl {
                break;
            }
        }
        Ok(passes)
    }
}

fn output_scaler(targets: &[f64]) -> Result<Standardizer> {
    let rows: Vec<[f64; 1]> = targets.iter().map(|&t| [t]).collect();
    Standardizer::fit(rows.iter().map(|r| r.as_slice()), 1)
}

fn standardize(values: &[f64], center_only_if_flat: bool) -> Vec<f64> {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd < 1e-8 {
        return if center_only_if_flat {
            values.iter().map(|v| v - mean).collect()
        } else {
            vec![0.0; values.len()]
        };
    }
    values.iter().map(|v| (v - mean) / sd).collect()
}
