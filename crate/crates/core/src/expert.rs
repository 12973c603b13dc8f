//! Victim ("expert") training: PPO-Lagrangian on the ground-truth cost, plus
//! the reward and cost critics that only privileged-access baseline attacks
//! may read.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::envs::{self, BlackBoxEnv, EnvSpec, Trajectory};
use crate::error::{check_dim, Error, Result};
use crate::nn::{Activation, Adam, AdamConfig, DenseNet, ScaledNet, Standardizer};
use crate::policy::Policy;
use crate::ppo::{PpoConfig, PpoLagrangian};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertConfig {
    pub epochs: usize,
    pub seed: u64,
    pub ppo: PpoConfig,
    /// Deterministic evaluation cadence for best-so-far selection.
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub critic: CriticConfig,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            epochs: 120,
            seed: 0,
            ppo: PpoConfig::default(),
            eval_every: 5,
            eval_episodes: 8,
            critic: CriticConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticConfig {
    pub hidden: Vec<usize>,
    pub episodes: usize,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub lr: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            episodes: 24,
            epochs: 30,
            minibatch_size: 256,
            lr: 1e-3,
        }
    }
}

/// Seeds reserved for deterministic checkpoint evaluation during training;
/// disjoint from the small seeds used by downstream evaluation.
pub const SELECTION_SEED_BASE: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertLogRow {
    pub epoch: usize,
    pub mean_return: f64,
    pub mean_cost: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug)]
pub struct ExpertOutcome {
    pub policy: Policy,
    pub critics: CriticPair,
    pub log: Vec<ExpertLogRow>,
    /// No checkpoint met the cost limit; `policy` is the least-cost one seen.
    pub warning: Option<String>,
    /// Training epoch whose checkpoint was returned (`None`: initialization).
    pub selected_epoch: Option<usize>,
}

/// Reward and cost Q-functions over concatenated `(state, action)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticPair {
    pub q_r: ScaledNet,
    pub q_c: ScaledNet,
}

pub fn initial_policy(spec: &EnvSpec, config: &ExpertConfig) -> Result<Policy> {
    let mut r = rng::derived(config.seed, 0x90);
    let scaler = Standardizer::new(vec![0.0; spec.state_dim], spec.observation_scale())?;
    Policy::new(
        scaler,
        &config.ppo.hidden,
        spec.action_bounds.clone(),
        config.ppo.std_start,
        &mut r,
    )
}

/// Deterministic-policy mean return and mean cost over consecutive seeds.
pub fn evaluate_deterministic(spec: &EnvSpec, policy: &Policy, seed_base: u64, episodes: usize) -> Result<(f64, f64)> {
    let mut ret = 0.0;
    let mut cost = 0.0;
    for i in 0..episodes {
        let traj = envs::rollout(spec, seed_base + i as u64, |s| policy.act_deterministic(s))?;
        ret += traj.total_reward();
        cost += traj.total_cost();
    }
    let n = episodes.max(1) as f64;
    Ok((ret / n, cost / n))
}

pub fn random_policy_return(spec: &EnvSpec, seed_base: u64, episodes: usize) -> Result<(f64, f64)> {
    let mut ret = 0.0;
    let mut cost = 0.0;
    for i in 0..episodes {
        let seed = seed_base + i as u64;
        let mut r = rng::derived(seed, 0x7a9d);
        let traj = envs::rollout(spec, seed, |_| {
            Ok(crate::policy::random_action(&spec.action_bounds, &mut r))
        })?;
        ret += traj.total_reward();
        cost += traj.total_cost();
    }
    let n = episodes.max(1) as f64;
    Ok((ret / n, cost / n))
}

pub fn train_expert(spec: &EnvSpec, config: &ExpertConfig) -> Result<ExpertOutcome> {
    spec.validate()?;
    config.ppo.validate()?;
    let policy = initial_policy(spec, config)?;
    let mut r = rng::derived(config.seed, 0x91);
    let mut trainer = PpoLagrangian::new(config.ppo.clone(), policy, spec.cost_limit, &mut r)?;
    let env = BlackBoxEnv::new(spec.clone());
    let gt = |s: &[f64], a: &[f64], n: &[f64]| envs::ground_truth_cost(spec, s, a, n);

    let mut log = Vec::with_capacity(config.epochs);
    // (feasible, return, cost, epoch, policy)
    let mut best: Option<(bool, f64, f64, usize, Policy)> = None;
    for epoch in 0..config.epochs {
        let std = config.ppo.std_at(epoch, config.epochs);
        let seed = config.seed.wrapping_mul(7919).wrapping_add(epoch as u64);
        let stats = trainer.epoch(&env, &gt, std, seed)?;
        log.push(ExpertLogRow {
            epoch,
            mean_return: stats.mean_return,
            mean_cost: stats.mean_cost,
            lambda: stats.lambda_after,
        });
        let last = epoch + 1 == config.epochs;
        if config.eval_every > 0 && ((epoch + 1) % config.eval_every == 0 || last) {
            let (ret, cost) = evaluate_deterministic(spec, &trainer.policy, SELECTION_SEED_BASE, config.eval_episodes)?;
            let feasible = cost <= spec.cost_limit;
            let better = match &best {
                None => true,
                Some((bf, br, bc, _, _)) => match (feasible, *bf) {
                    (true, false) => true,
                    (false, true) => false,
                    (true, true) => ret > *br,
                    (false, false) => cost < *bc,
                },
            };
            if better {
                best = Some((feasible, ret, cost, epoch, trainer.policy.clone()));
            }
        }
    }

    let (policy, warning, selected_epoch) = match best {
        Some((true, _, _, epoch, p)) => (p, None, Some(epoch)),
        Some((false, _, cost, epoch, p)) => (
            p,
            Some(format!(
                "no checkpoint met the cost limit {}; best evaluated cost {cost}",
                spec.cost_limit
            )),
            Some(epoch),
        ),
        None if config.epochs == 0 => (trainer.policy.clone(), None, None),
        None => (trainer.policy.clone(), None, Some(config.epochs - 1)),
    };
    let mut policy = policy;
    if config.epochs > 0 {
        policy.exploration_std = config.ppo.std_end;
    }
    let critics = fit_critics(spec, &policy, &config.critic, config.ppo.gamma, config.seed)?;
    Ok(ExpertOutcome {
        policy,
        critics,
        log,
        warning,
        selected_epoch,
    })
}

/// Stochastic rollouts of `policy` with discounted reward-to-go and
/// cost-to-go per step.
fn critic_data(
    spec: &EnvSpec,
    policy: &Policy,
    episodes: usize,
    gamma: f64,
    seed: u64,
) -> Result<Vec<(Vec<f64>, f64, f64)>> {
    let mut rows = Vec::new();
    for ep in 0..episodes {
        let ep_seed = seed.wrapping_mul(31).wrapping_add(ep as u64) ^ 0xc41c;
        let mut noise = rng::derived(ep_seed, 0xc1);
        let traj = envs::rollout(spec, ep_seed, |s| policy.act(s, false, &mut noise))?;
        let mut g_r = 0.0;
        let mut g_c = 0.0;
        let mut episode_rows = Vec::with_capacity(traj.len());
        for tr in traj.transitions.iter().rev() {
            g_r = tr.reward + gamma * g_r;
            g_c = tr.cost + gamma * g_c;
            let mut x = tr.state.clone();
            x.extend_from_slice(&tr.action);
            episode_rows.push((x, g_r, g_c));
        }
        episode_rows.reverse();
        rows.extend(episode_rows);
    }
    Ok(rows)
}

fn regressor(inputs: &[&[f64]], targets: &[f64], hidden: &[usize], seed: u64) -> Result<ScaledNet> {
    let dim = inputs[0].len();
    let input = Standardizer::fit(inputs.iter().copied(), dim)?;
    let rows: Vec<[f64; 1]> = targets.iter().map(|&t| [t]).collect();
    let output = Standardizer::fit(rows.iter().map(|r| r.as_slice()), 1)?;
    let mut sizes = vec![dim];
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    let mut r = rng::seeded(seed);
    let net = DenseNet::new(&sizes, Activation::Tanh, Activation::Identity, &mut r)?;
    ScaledNet::new(input, output, net)
}

fn fit_scalar(
    model: &mut ScaledNet,
    inputs: &[&[f64]],
    targets: &[f64],
    config: &CriticConfig,
    seed: u64,
) -> Result<()> {
    let mut opt = Adam::for_net(AdamConfig::with_lr(config.lr), &model.net);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut r = rng::seeded(seed);
    let rows: Vec<[f64; 1]> = targets.iter().map(|&t| [t]).collect();
    for _ in 0..config.epochs {
        for i in (1..order.len()).rev() {
            let j = r.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(config.minibatch_size.max(1)) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| inputs[i]).collect();
            let ts: Vec<&[f64]> = chunk.iter().map(|&i| rows[i].as_slice()).collect();
            model.regression_step(&xs, &ts, &mut opt)?;
        }
    }
    Ok(())
}

pub fn fit_critics(
    spec: &EnvSpec,
    policy: &Policy,
    config: &CriticConfig,
    gamma: f64,
    seed: u64,
) -> Result<CriticPair> {
    let data = if config.episodes == 0 {
        Vec::new()
    } else {
        critic_data(spec, policy, config.episodes, gamma, seed)?
    };
    if data.is_empty() {
        let dim = spec.state_dim + spec.action_dim;
        let mut r = rng::seeded(seed);
        let mk = |r: &mut rng::Rng| -> Result<ScaledNet> {
            let mut sizes = vec![dim];
            sizes.extend_from_slice(&config.hidden);
            sizes.push(1);
            ScaledNet::with_input_scaling(
                Standardizer::identity(dim),
                DenseNet::new(&sizes, Activation::Tanh, Activation::Identity, r)?,
            )
        };
        return Ok(CriticPair {
            q_r: mk(&mut r)?,
            q_c: mk(&mut r)?,
        });
    }
    let inputs: Vec<&[f64]> = data.iter().map(|d| d.0.as_slice()).collect();
    let t_r: Vec<f64> = data.iter().map(|d| d.1).collect();
    let t_c: Vec<f64> = data.iter().map(|d| d.2).collect();
    let mut q_r = regressor(&inputs, &t_r, &config.hidden, seed ^ 0x51)?;
    let mut q_c = regressor(&inputs, &t_c, &config.hidden, seed ^ 0x52)?;
    fit_scalar(&mut q_r, &inputs, &t_r, config, seed ^ 0x53)?;
    fit_scalar(&mut q_c, &inputs, &t_c, config, seed ^ 0x54)?;
    Ok(CriticPair { q_r, q_c })
}

/// Coefficient of determination of both critics on fresh rollouts.
pub fn critic_r_squared(
    spec: &EnvSpec,
    policy: &Policy,
    critics: &CriticPair,
    episodes: usize,
    gamma: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    let data = critic_data(spec, policy, episodes, gamma, seed)?;
    let r2 = |model: &ScaledNet, pick: fn(&(Vec<f64>, f64, f64)) -> f64| -> Result<f64> {
        let ys: Vec<f64> = data.iter().map(pick).collect();
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let ss_tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
        let mut ss_res = 0.0;
        for (d, y) in data.iter().zip(&ys) {
            ss_res += (model.forward(&d.0)?[0] - y).powi(2);
        }
        Ok(if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 })
    };
    Ok((r2(&critics.q_r, |d| d.1)?, r2(&critics.q_c, |d| d.2)?))
}

/// Roll out `policy` stochastically (its `exploration_std`) for `episodes`
/// episodes; episode `i` uses reset seed `seed + i`.
pub fn collect_demos(spec: &EnvSpec, policy: &Policy, episodes: usize, seed: u64) -> Result<Vec<Trajectory>> {
    check_dim("policy state", spec.state_dim, policy.state_dim())?;
    (0..episodes)
        .map(|i| {
            let ep_seed = seed + i as u64;
            let mut noise = rng::derived(ep_seed, 0xde70);
            envs::rollout(spec, ep_seed, |s| policy.act(s, false, &mut noise))
        })
        .collect()
}

/// Collect demonstrations and write them as a dataset directory.
pub fn write_demos(
    dir: &Path,
    spec: &EnvSpec,
    policy: &Policy,
    episodes: usize,
    seed: u64,
) -> Result<envs::DemoManifest> {
    let trajectories = collect_demos(spec, policy, episodes, seed)?;
    envs::write_demo_dataset(dir, spec, &trajectories)
}

pub fn log_csv(log: &[ExpertLogRow]) -> String {
    let mut out = String::from("epoch,return,cost,lambda\n");
    for row in log {
        writeln!(
            out,
            "{},{:?},{:?},{:?}",
            row.epoch, row.mean_return, row.mean_cost, row.lambda
        )
        .unwrap();
    }
    out
}

impl CriticPair {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.q_r.save(&dir.join("q_r.weights"))?;
        self.q_c.save(&dir.join("q_c.weights"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            q_r: ScaledNet::load(&dir.join("q_r.weights"))?,
            q_c: ScaledNet::load(&dir.join("q_c.weights"))?,
        })
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        self.ppo.validate()?;
        if self.eval_every > 0 && self.eval_episodes == 0 {
            return Err(Error::InvalidConfig("eval_episodes must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvKind;

    #[test]
    fn zero_epochs_returns_initialization() {
        let spec = EnvSpec::new(EnvKind::PointVelocity);
        let config = ExpertConfig {
            epochs: 0,
            critic: CriticConfig {
                episodes: 0,
                ..CriticConfig::default()
            },
            ..ExpertConfig::default()
        };
        let out = train_expert(&spec, &config).unwrap();
        assert_eq!(out.policy, initial_policy(&spec, &config).unwrap());
        assert!(out.log.is_empty());
        assert_eq!(out.selected_epoch, None);
    }

    #[test]
    fn empty_demo_collection() {
        let spec = EnvSpec::new(EnvKind::BallRun);
        let policy = initial_policy(&spec, &ExpertConfig::default()).unwrap();
        assert!(collect_demos(&spec, &policy, 0, 3).unwrap().is_empty());
    }
}
