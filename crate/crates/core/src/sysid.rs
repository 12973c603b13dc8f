//! One-step dynamics model fitted to observed transitions.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::bounds::{draw_perturbation, LipschitzEstimate, LipschitzMethod, LipschitzTarget};
use crate::error::{check_dim, Error, Result};
use crate::icrl::StepSample;
use crate::nn::{Activation, Adam, AdamConfig, DenseNet, ScaledNet, Standardizer, Trace};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SysidConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of whole trajectories held out for evaluation.
    pub holdout_fraction: f64,
    pub min_transitions: usize,
    /// Per-dimension held-out mean squared error above which the fit is
    /// flagged as failed.
    pub mse_threshold: f64,
    pub seed: u64,
}

impl Default for SysidConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            epochs: 40,
            batch_size: 128,
            lr: 1e-3,
            holdout_fraction: 0.2,
            min_transitions: 1000,
            mse_threshold: 1e-2,
            seed: 0,
        }
    }
}

/// Predicts `next_state = state + delta(state, action)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsModel {
    pub model: ScaledNet,
    pub state_dim: usize,
    /// Held-out mean squared error per state dimension, when known.
    pub heldout_mse: Option<Vec<f64>>,
    /// Held-out error exceeded the configured threshold.
    pub failed: bool,
}

impl DynamicsModel {
    pub fn from_model(model: ScaledNet, state_dim: usize) -> Result<Self> {
        check_dim("dynamics output", state_dim, model.output_dim())?;
        if model.input_dim() <= state_dim {
            return Err(Error::InvalidConfig("dynamics input must include an action".into()));
        }
        Ok(Self {
            model,
            state_dim,
            heldout_mse: None,
            failed: false,
        })
    }

    /// A model whose predicted delta is always zero.
    pub fn zero(state_dim: usize, action_dim: usize) -> Result<Self> {
        let width = state_dim + action_dim;
        let net = DenseNet::zeros(&[width, state_dim], Activation::Identity, Activation::Identity)?;
        Self::from_model(
            ScaledNet::with_input_scaling(Standardizer::identity(width), net)?,
            state_dim,
        )
    }

    pub fn action_dim(&self) -> usize {
        self.model.input_dim() - self.state_dim
    }

    pub fn predict(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        check_dim("dynamics state", self.state_dim, state.len())?;
        check_dim("dynamics action", self.action_dim(), action.len())?;
        let delta = self.model.forward(&[state, action].concat())?;
        Ok(state.iter().zip(&delta).map(|(s, d)| s + d).collect())
    }

    /// Prediction with the vector-Jacobian product of `weighting` taken
    /// with respect to state and action.
    pub fn predict_vjp(
        &self,
        state: &[f64],
        action: &[f64],
        weighting: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        check_dim("dynamics state", self.state_dim, state.len())?;
        check_dim("dynamics action", self.action_dim(), action.len())?;
        check_dim("dynamics weighting", self.state_dim, weighting.len())?;
        let mut trace = Trace::default();
        self.model.forward_trace(&[state, action].concat(), &mut trace);
        let delta = self.model.output_of(&trace);
        let mut g = self.model.backward(&trace, weighting, None);
        let g_a = g.split_off(self.state_dim);
        for (gs, w) in g.iter_mut().zip(weighting) {
            *gs += w;
        }
        let next = state.iter().zip(&delta).map(|(s, d)| s + d).collect();
        Ok((next, g, g_a))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.model.save(path)
    }

    pub fn load(path: &Path, state_dim: usize) -> Result<Self> {
        Self::from_model(ScaledNet::load(path)?, state_dim)
    }
}

/// Trajectory indices used for fitting and for evaluation. The two sets are
/// disjoint by construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataSplit {
    train: Vec<usize>,
    heldout: Vec<usize>,
}

impl DataSplit {
    pub fn new(train: Vec<usize>, heldout: Vec<usize>) -> Result<Self> {
        if let Some(i) = train.iter().find(|i| heldout.contains(i)) {
            return Err(Error::InvalidConfig(format!(
                "trajectory {i} appears in both the training and held-out sets"
            )));
        }
        if train.is_empty() || heldout.is_empty() {
            return Err(Error::InsufficientData("both split sides need a trajectory".into()));
        }
        Ok(Self { train, heldout })
    }

    /// Shuffle whole trajectories and hold out `fraction` of them (at least
    /// one on each side).
    pub fn by_trajectory(count: usize, fraction: f64, seed: u64) -> Result<Self> {
        if count < 2 {
            return Err(Error::InsufficientData(format!(
                "need at least two trajectories to split, got {count}"
            )));
        }
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "holdout fraction {fraction} must lie in (0, 1)"
            )));
        }
        let mut idx: Vec<usize> = (0..count).collect();
        idx.shuffle(&mut rng::derived(seed, 0x5b1));
        let n_held = ((count as f64 * fraction).round() as usize).clamp(1, count - 1);
        let heldout = idx.split_off(count - n_held);
        Self::new(idx, heldout)
    }

    pub fn train(&self) -> &[usize] {
        &self.train
    }

    pub fn heldout(&self) -> &[usize] {
        &self.heldout
    }
}

pub fn train_dynamics(episodes: &[Vec<StepSample>], config: &SysidConfig) -> Result<DynamicsModel> {
    let split = DataSplit::by_trajectory(episodes.len(), config.holdout_fraction, config.seed)?;
    train_dynamics_with_split(episodes, &split, config)
}

pub fn train_dynamics_with_split(
    episodes: &[Vec<StepSample>],
    split: &DataSplit,
    config: &SysidConfig,
) -> Result<DynamicsModel> {
    let total: usize = episodes.iter().map(Vec::len).sum();
    if total < config.min_transitions {
        return Err(Error::InsufficientData(format!(
            "{total} transitions, need at least {}",
            config.min_transitions
        )));
    }
    if let Some(&i) = split.train.iter().chain(&split.heldout).find(|&&i| i >= episodes.len()) {
        return Err(Error::InvalidConfig(format!(
            "split names trajectory {i} of {}",
            episodes.len()
        )));
    }
    let first = episodes
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::InsufficientData("no transitions".into()))?;
    let (state_dim, action_dim) = (first.state.len(), first.action.len());
    let train: Vec<&StepSample> = split.train.iter().flat_map(|&i| &episodes[i]).collect();
    let heldout: Vec<&StepSample> = split.heldout.iter().flat_map(|&i| &episodes[i]).collect();
    for s in train.iter().chain(&heldout) {
        check_dim("transition state", state_dim, s.state.len())?;
        check_dim("transition action", action_dim, s.action.len())?;
        check_dim("transition next state", state_dim, s.next_state.len())?;
    }

    let inputs: Vec<Vec<f64>> = train.iter().map(|s| [&s.state[..], &s.action[..]].concat()).collect();
    let deltas: Vec<Vec<f64>> = train
        .iter()
        .map(|s| s.next_state.iter().zip(&s.state).map(|(n, c)| n - c).collect())
        .collect();
    let in_scaler = Standardizer::fit(inputs.iter().map(|x| x.as_slice()), state_dim + action_dim)?;
    let out_scaler = Standardizer::fit(deltas.iter().map(|x| x.as_slice()), state_dim)?;
    let mut sizes = vec![state_dim + action_dim];
    sizes.extend_from_slice(&config.hidden);
    sizes.push(state_dim);
    let mut r = rng::derived(config.seed, 0xd1);
    let mut net = DenseNet::new(&sizes, Activation::Tanh, Activation::Identity, &mut r)?;
    // Start from "nothing moves"; the output layer learns away from it.
    net.scale_output_layer(0.0);
    let mut model = DynamicsModel::from_model(ScaledNet::new(in_scaler, out_scaler, net)?, state_dim)?;

    let mut opt = Adam::for_net(AdamConfig::with_lr(config.lr), &model.model.net);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for _ in 0..config.epochs {
        for i in (1..order.len()).rev() {
            let j = r.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(config.batch_size.max(1)) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| inputs[i].as_slice()).collect();
            let ts: Vec<&[f64]> = chunk.iter().map(|&i| deltas[i].as_slice()).collect();
            model.model.regression_step(&xs, &ts, &mut opt)?;
        }
    }

    let mse = heldout_mse(&model, &heldout)?;
    model.failed = mse.iter().any(|&m| !(m <= config.mse_threshold));
    model.heldout_mse = Some(mse);
    Ok(model)
}

/// Mean squared next-state error per dimension.
pub fn heldout_mse(model: &DynamicsModel, rows: &[&StepSample]) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut acc = vec![0.0; model.state_dim];
    for s in rows {
        let pred = model.predict(&s.state, &s.action)?;
        for ((a, p), n) in acc.iter_mut().zip(&pred).zip(&s.next_state) {
            *a += (p - n).powi(2);
        }
    }
    Ok(acc.into_iter().map(|a| a / rows.len() as f64).collect())
}

/// Running-max estimate of the dynamics' slope in the infinity norm: the
/// largest `|f(s + u, a) - f(s, a)| / |u|` over `draws` sampled pairs, with
/// `a` held at the action recorded for `s`. The pairs come from one seeded
/// stream, so more draws never lower the estimate.
pub fn estimate_dynamics_lipschitz<F>(
    dynamics: F,
    samples: &[(Vec<f64>, Vec<f64>)],
    radius: f64,
    draws: usize,
    seed: u64,
) -> Result<LipschitzEstimate>
where
    F: Fn(&[f64], &[f64]) -> Result<Vec<f64>>,
{
    if samples.is_empty() {
        return Err(Error::InsufficientData("no state samples".into()));
    }
    if !(radius > 0.0) {
        return Err(Error::InvalidConfig(format!("radius {radius} must be positive")));
    }
    let mut r = rng::derived(seed, 0x11f);
    let mut best: f64 = 0.0;
    let mut used = 0;
    for i in 0..draws {
        let (s, a) = &samples[r.random_range(0..samples.len())];
        let u = draw_perturbation(s.len(), radius, i, &mut r);
        let norm = u.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if norm == 0.0 {
            continue;
        }
        let moved: Vec<f64> = s.iter().zip(&u).map(|(x, d)| x + d).collect();
        let f0 = dynamics(s, a)?;
        let f1 = dynamics(&moved, a)?;
        let diff = f0.iter().zip(&f1).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        best = best.max(diff / norm);
        used += 1;
    }
    Ok(LipschitzEstimate {
        value: best,
        target: LipschitzTarget::Dynamics,
        samples: used,
        radius,
        method: LipschitzMethod::PairRatio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(episodes: usize, len: usize, motion: bool) -> Vec<Vec<StepSample>> {
        let mut r = rng::seeded(3);
        (0..episodes)
            .map(|_| {
                (0..len)
                    .map(|_| {
                        let state: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
                        let action: Vec<f64> = (0..2).map(|_| r.random_range(-1.0..1.0)).collect();
                        let next_state = if motion {
                            vec![
                                state[0] + 0.1 * state[2],
                                state[1] + 0.1 * state[3],
                                state[2] + 0.1 * action[0],
                                state[3] + 0.1 * action[1],
                            ]
                        } else {
                            state.clone()
                        };
                        StepSample {
                            state,
                            action,
                            next_state,
                        }
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn zero_motion_data_gives_zero_delta() {
        let data = synthetic(10, 120, false);
        let cfg = SysidConfig {
            epochs: 5,
            hidden: vec![16],
            ..SysidConfig::default()
        };
        let model = train_dynamics(&data, &cfg).unwrap();
        assert!(model.heldout_mse.as_ref().unwrap().iter().all(|&m| m == 0.0));
        let s = [0.3, 0.2, -0.1, 0.5];
        assert_eq!(model.predict(&s, &[0.1, 0.1]).unwrap(), s.to_vec());
        assert!(!model.failed);
    }

    #[test]
    fn linear_motion_is_learned() {
        let data = synthetic(10, 150, true);
        let cfg = SysidConfig {
            epochs: 30,
            hidden: vec![32],
            ..SysidConfig::default()
        };
        let model = train_dynamics(&data, &cfg).unwrap();
        assert!(!model.failed, "{:?}", model.heldout_mse);
    }

    #[test]
    fn too_few_transitions_rejected() {
        let data = synthetic(4, 100, true);
        assert!(matches!(
            train_dynamics(&data, &SysidConfig::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn overlapping_split_rejected() {
        assert!(DataSplit::new(vec![0, 1, 2], vec![2, 3]).is_err());
        let split = DataSplit::by_trajectory(10, 0.2, 1).unwrap();
        assert_eq!(split.heldout().len(), 2);
        assert!(split.train().iter().all(|i| !split.heldout().contains(i)));
    }

    #[test]
    fn zero_model_is_identity() {
        let m = DynamicsModel::zero(4, 2).unwrap();
        let s = [1.0, -2.0, 0.5, 0.25];
        assert_eq!(m.predict(&s, &[0.3, -0.3]).unwrap(), s.to_vec());
    }

    #[test]
    fn prediction_gradient_matches_finite_differences() {
        let data = synthetic(6, 200, true);
        let cfg = SysidConfig {
            epochs: 2,
            hidden: vec![8],
            ..SysidConfig::default()
        };
        let m = train_dynamics(&data, &cfg).unwrap();
        let (s, a) = ([0.2, -0.1, 0.3, 0.4], [0.5, -0.5]);
        let w = [0.3, -1.0, 0.7, 0.2];
        let (_, g_s, g_a) = m.predict_vjp(&s, &a, &w).unwrap();
        let f = |s: &[f64], a: &[f64]| -> f64 { m.predict(s, a).unwrap().iter().zip(&w).map(|(p, w)| p * w).sum() };
        let h = 1e-6;
        for i in 0..4 {
            let (mut sp, mut sm) = (s, s);
            sp[i] += h;
            sm[i] -= h;
            let fd = (f(&sp, &a) - f(&sm, &a)) / (2.0 * h);
            assert!((fd - g_s[i]).abs() <= 1e-4 * fd.abs().max(1e-3));
        }
        for i in 0..2 {
            let (mut ap, mut am) = (a, a);
            ap[i] += h;
            am[i] -= h;
            let fd = (f(&s, &ap) - f(&s, &am)) / (2.0 * h);
            assert!((fd - g_a[i]).abs() <= 1e-4 * fd.abs().max(1e-3));
        }
    }

    #[test]
    fn lipschitz_of_linear_maps() {
        let samples: Vec<(Vec<f64>, Vec<f64>)> = (0..50)
            .map(|i| (vec![i as f64 * 0.1, 1.0, -0.5, 0.2], vec![0.0, 0.0]))
            .collect();
        let half = |s: &[f64], _: &[f64]| Ok(s.iter().map(|x| 0.5 * x).collect());
        let est = estimate_dynamics_lipschitz(half, &samples, 0.1, 10_000, 0).unwrap();
        assert!((est.value - 0.5).abs() <= 0.005 && est.value <= 0.5 + 1e-12);
        let ident = |s: &[f64], _: &[f64]| Ok(s.to_vec());
        let est = estimate_dynamics_lipschitz(ident, &samples, 0.1, 1000, 0).unwrap();
        assert!((est.value - 1.0).abs() < 1e-9);
    }

    #[test]
    fn lipschitz_estimate_grows_with_draws() {
        let samples: Vec<(Vec<f64>, Vec<f64>)> = (0..20)
            .map(|i| (vec![(i as f64).sin(), (i as f64).cos()], vec![0.0]))
            .collect();
        let f = |s: &[f64], _: &[f64]| Ok(vec![(3.0 * s[0]).sin() + s[1] * s[1], s[0] * s[1]]);
        let mut last = 0.0;
        for n in [1, 10, 100, 1000] {
            let est = estimate_dynamics_lipschitz(f, &samples, 0.2, n, 5).unwrap();
            assert!(est.value >= last);
            last = est.value;
        }
    }
}
