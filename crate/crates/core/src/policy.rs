use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Result};
use crate::nn::{Activation, DenseNet, ScaledNet, Standardizer, Trace};
use crate::rng::Rng;

/// Gaussian policy in a pre-squash space, squashed into the action box with
/// `tanh`. The deterministic action is the squashed mean.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub model: ScaledNet,
    pub action_bounds: Vec<(f64, f64)>,
    /// Standard deviation of the pre-squash exploration noise.
    pub exploration_std: f64,
}

impl Policy {
    pub fn new(
        input: Standardizer,
        hidden: &[usize],
        action_bounds: Vec<(f64, f64)>,
        exploration_std: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut sizes = vec![input.dim()];
        sizes.extend_from_slice(hidden);
        sizes.push(action_bounds.len());
        let mut net = DenseNet::new(&sizes, Activation::Tanh, Activation::Identity, rng)?;
        // Start close to the centre of the action box.
        net.scale_output_layer(0.01);
        Ok(Self {
            model: ScaledNet::with_input_scaling(input, net)?,
            action_bounds,
            exploration_std,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.model.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.action_bounds.len()
    }

    /// Pre-squash mean.
    pub fn mean(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.model.forward(state)
    }

    pub fn squash(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(&self.action_bounds)
            .map(|(&u, &(lo, hi))| {
                let mid = 0.5 * (lo + hi);
                let half = 0.5 * (hi - lo);
                (mid + half * u.tanh()).clamp(lo, hi)
            })
            .collect()
    }

    pub fn act(&self, state: &[f64], deterministic: bool, rng: &mut Rng) -> Result<Vec<f64>> {
        let mean = self.mean(state)?;
        if deterministic {
            return Ok(self.squash(&mean));
        }
        let u: Vec<f64> = mean
            .iter()
            .map(|m| m + self.exploration_std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(self.squash(&u))
    }

    pub fn act_deterministic(&self, state: &[f64]) -> Result<Vec<f64>> {
        Ok(self.squash(&self.mean(state)?))
    }

    /// Deterministic action together with `d(weighting · action)/dstate`.
    pub fn action_vjp(&self, state: &[f64], weighting: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim("policy state", self.state_dim(), state.len())?;
        check_dim("action weighting", self.action_dim(), weighting.len())?;
        let mut trace = Trace::default();
        self.model.forward_trace(state, &mut trace);
        let u = self.model.output_of(&trace);
        let action = self.squash(&u);
        let g_u: Vec<f64> = u
            .iter()
            .zip(weighting)
            .zip(&self.action_bounds)
            .map(|((&u, &w), &(lo, hi))| {
                let t = u.tanh();
                w * 0.5 * (hi - lo) * (1.0 - t * t)
            })
            .collect();
        let grad = self.model.backward(&trace, &g_u, None);
        Ok((action, grad))
    }

    /// Jacobian `d action / d state`, one row per action dimension.
    pub fn action_jacobian(&self, state: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let mut rows = Vec::with_capacity(self.action_dim());
        let mut action = Vec::new();
        for i in 0..self.action_dim() {
            let mut w = vec![0.0; self.action_dim()];
            w[i] = 1.0;
            let (a, g) = self.action_vjp(state, &w)?;
            action = a;
            rows.push(g);
        }
        Ok((action, rows))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.model.save(path)
    }

    pub fn load(path: &Path, action_bounds: Vec<(f64, f64)>, exploration_std: f64) -> Result<Self> {
        let model = ScaledNet::load(path)?;
        check_dim("policy output", action_bounds.len(), model.output_dim())?;
        Ok(Self {
            model,
            action_bounds,
            exploration_std,
        })
    }
}

/// Query-only view of a deployed policy: the victim as the attacker sees it.
pub trait ActionOracle {
    fn query(&self, observation: &[f64]) -> Result<Vec<f64>>;
}

impl ActionOracle for Policy {
    fn query(&self, observation: &[f64]) -> Result<Vec<f64>> {
        self.act_deterministic(observation)
    }
}

/// Uniformly random actions inside the box.
pub fn random_action(bounds: &[(f64, f64)], rng: &mut Rng) -> Vec<f64> {
    bounds
        .iter()
        .map(|&(lo, hi)| if hi > lo { rng.random_range(lo..=hi) } else { lo })
        .collect()
}
