//! Observation perturbations.
//!
//! Every attack here is a signed-gradient ascent inside the infinity box of
//! radius `epsilon` around the true state. They differ in what they climb:
//!
//! * `icrl` climbs the attacker's own surrogate chain (learner policy, learned
//!   dynamics, learned constraint) and never touches the victim.
//! * `fgsm`, `pgd`, `max_reward` and `max_cost` climb the victim's own
//!   critics through the victim's policy, so they need privileged access.
//! * `random` draws a uniform offset from the box.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::expert::CriticPair;
use crate::icrl::{ConstraintModel, PsiInput};
use crate::nn::ScaledNet;
use crate::policy::Policy;
use crate::rng;
use crate::sysid::DynamicsModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    Icrl,
    Fgsm,
    Pgd,
    MaxReward,
    MaxCost,
    Random,
}

impl AttackKind {
    pub const ALL: [AttackKind; 7] = [
        AttackKind::None,
        AttackKind::Icrl,
        AttackKind::Fgsm,
        AttackKind::Pgd,
        AttackKind::MaxReward,
        AttackKind::MaxCost,
        AttackKind::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Icrl => "icrl",
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::MaxReward => "max_reward",
            AttackKind::MaxCost => "max_cost",
            AttackKind::Random => "random",
        }
    }

    pub fn is_baseline(self) -> bool {
        matches!(
            self,
            AttackKind::Fgsm | AttackKind::Pgd | AttackKind::MaxReward | AttackKind::MaxCost
        )
    }

    pub fn access(self) -> AccessLevel {
        match self {
            AttackKind::None | AttackKind::Random => AccessLevel::Blind,
            AttackKind::Icrl => AccessLevel::Trajectories,
            _ => AccessLevel::Critics,
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.replace('-', "_").to_ascii_lowercase();
        AttackKind::ALL
            .into_iter()
            .find(|k| k.name() == key)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown attack `{s}`")))
    }
}

/// What an attack was allowed to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum AccessLevel {
    /// Nothing beyond the current observation.
    Blind,
    /// Demonstrations plus reset/step access to the environment.
    Trajectories,
    /// The victim's policy gradients and critics as well.
    Critics,
}

/// Where the learned dynamics are evaluated inside the surrogate objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateBase {
    /// `psi(f(s, learner(s + delta)))`: the perturbation acts only through
    /// the action it induces, and the step starts from the true state.
    #[default]
    TrueState,
    /// `psi(f(s + delta, learner(s + delta)))`: the perturbed observation is
    /// also fed to the dynamics model as if it were the state.
    PerturbedState,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Infinity-norm budget.
    pub epsilon: f64,
    pub iterations: usize,
    /// Fraction of `epsilon` moved per iteration.
    pub step_size: f64,
    pub surrogate_base: SurrogateBase,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: AttackKind::Icrl,
            epsilon: 0.0,
            iterations: 10,
            step_size: 0.25,
            surrogate_base: SurrogateBase::default(),
        }
    }
}

impl AttackConfig {
    pub fn new(kind: AttackKind, epsilon: f64) -> Self {
        Self {
            kind,
            epsilon,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "epsilon {} must be finite and non-negative",
                self.epsilon
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be at least 1".into()));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "step_size {} must be positive",
                self.step_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub delta: Vec<f64>,
    pub iterations_used: usize,
    /// Objective value at the returned perturbation (`NaN` for blind draws).
    pub final_value: f64,
    pub access: AccessLevel,
    /// Set when the attack gave up, e.g. on a non-finite gradient.
    pub diagnostic: Option<String>,
}

impl Perturbation {
    pub fn zero(dim: usize, access: AccessLevel) -> Self {
        Self {
            delta: vec![0.0; dim],
            iterations_used: 0,
            final_value: f64::NAN,
            access,
            diagnostic: None,
        }
    }

    pub fn norm(&self) -> f64 {
        self.delta.iter().fold(0.0f64, |m, d| m.max(d.abs()))
    }
}

/// A differentiable function of the observation shown to the victim.
pub trait AttackObjective {
    fn dim(&self) -> usize;
    fn value_and_gradient(&self, observation: &[f64]) -> Result<(f64, Vec<f64>)>;
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Signed-gradient ascent on `objective` starting from `state`.
///
/// Each iteration moves every coordinate by `step_size * epsilon` in the
/// direction of the gradient sign and clips the offset back into the box.
/// With `keep_best` the best iterate seen (including the unperturbed start)
/// is returned instead of the last one.
pub fn sign_ascent(
    state: &[f64],
    objective: &dyn AttackObjective,
    epsilon: f64,
    iterations: usize,
    step_size: f64,
    keep_best: bool,
    access: AccessLevel,
) -> Result<Perturbation> {
    check_dim("attack state", objective.dim(), state.len())?;
    let moved = |delta: &[f64]| -> Vec<f64> { state.iter().zip(delta).map(|(s, d)| s + d).collect() };
    let mut delta = vec![0.0; state.len()];
    let mut best: Option<(f64, Vec<f64>)> = None;
    let step = step_size * epsilon;
    let give_up = |why: String| {
        Ok(Perturbation {
            diagnostic: Some(why),
            ..Perturbation::zero(state.len(), access)
        })
    };
    for _ in 0..iterations {
        let (value, grad) = objective.value_and_gradient(&moved(&delta))?;
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return give_up("non-finite objective gradient".into());
        }
        if keep_best && best.as_ref().is_none_or(|(b, _)| value > *b) {
            best = Some((value, delta.clone()));
        }
        for (d, g) in delta.iter_mut().zip(&grad) {
            *d = (*d + step * sign(*g)).clamp(-epsilon, epsilon);
        }
    }
    let (value, _) = objective.value_and_gradient(&moved(&delta))?;
    if !value.is_finite() {
        return give_up("non-finite objective value".into());
    }
    let (final_value, delta) = match best {
        Some((b, d)) if keep_best && b >= value => (b, d),
        _ => (value, delta),
    };
    Ok(Perturbation {
        delta,
        iterations_used: iterations,
        final_value,
        access,
        diagnostic: None,
    })
}

/// The attacker's own models, trained from demonstrations and black-box
/// interaction only.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateModels {
    pub learner: Policy,
    pub dynamics: DynamicsModel,
    pub constraint: ConstraintModel,
}

impl SurrogateModels {
    pub fn validate(&self) -> Result<()> {
        let s = self.learner.state_dim();
        check_dim("dynamics state", s, self.dynamics.state_dim)?;
        check_dim("constraint state", s, self.constraint.state_dim)?;
        check_dim("dynamics action", self.learner.action_dim(), self.dynamics.action_dim())?;
        check_dim(
            "constraint action",
            self.learner.action_dim(),
            self.constraint.action_dim(),
        )
    }
}

/// Learned cost of the predicted next state, as a function of the observation
/// the learner is shown.
pub struct SurrogateObjective<'a> {
    pub models: &'a SurrogateModels,
    pub true_state: &'a [f64],
    pub base: SurrogateBase,
}

impl AttackObjective for SurrogateObjective<'_> {
    fn dim(&self) -> usize {
        self.models.learner.state_dim()
    }

    fn value_and_gradient(&self, observation: &[f64]) -> Result<(f64, Vec<f64>)> {
        let m = self.models;
        let action = m.learner.act_deterministic(observation)?;
        let base = match self.base {
            SurrogateBase::TrueState => self.true_state,
            SurrogateBase::PerturbedState => observation,
        };
        let predicted = m.dynamics.predict(base, &action)?;
        let (value, g_pred) = match m.constraint.input {
            PsiInput::StateAction => {
                let next_action = m.learner.act_deterministic(&predicted)?;
                let (v, mut g_s, g_a) = m.constraint.value_and_gradient(&predicted, &next_action)?;
                let (_, via_action) = m.learner.action_vjp(&predicted, &g_a)?;
                for (g, t) in g_s.iter_mut().zip(&via_action) {
                    *g += t;
                }
                (v, g_s)
            }
            PsiInput::NextState => {
                let zero = vec![0.0; m.constraint.action_dim()];
                let (v, g_s, _) = m.constraint.value_and_gradient(&predicted, &zero)?;
                (v, g_s)
            }
        };
        let (_, g_base, g_action) = m.dynamics.predict_vjp(base, &action, &g_pred)?;
        let (_, mut grad) = m.learner.action_vjp(observation, &g_action)?;
        if self.base == SurrogateBase::PerturbedState {
            for (g, b) in grad.iter_mut().zip(&g_base) {
                *g += b;
            }
        }
        Ok((value, grad))
    }
}

/// Surrogate objective at a given perturbation.
pub fn surrogate_violation_value(
    models: &SurrogateModels,
    state: &[f64],
    delta: &[f64],
    base: SurrogateBase,
) -> Result<f64> {
    check_dim("perturbation", state.len(), delta.len())?;
    let objective = SurrogateObjective {
        models,
        true_state: state,
        base,
    };
    let observation: Vec<f64> = state.iter().zip(delta).map(|(s, d)| s + d).collect();
    Ok(objective.value_and_gradient(&observation)?.0)
}

/// The learned-constraint attack. Reads only the attacker's surrogate models.
pub fn icrl_attack(state: &[f64], models: &SurrogateModels, config: &AttackConfig) -> Result<Perturbation> {
    config.validate()?;
    if config.kind != AttackKind::Icrl {
        return Err(Error::InvalidConfig(format!(
            "icrl_attack called with kind {}",
            config.kind
        )));
    }
    let objective = SurrogateObjective {
        models,
        true_state: state,
        base: config.surrogate_base,
    };
    sign_ascent(
        state,
        &objective,
        config.epsilon,
        config.iterations,
        config.step_size,
        true,
        AccessLevel::Trajectories,
    )
}

/// Victim internals that only privileged baselines may read.
#[derive(Clone, Debug, PartialEq)]
pub struct PrivilegedVictim {
    pub policy: Policy,
    pub critics: Option<CriticPair>,
}

/// `sign * q(x, victim(x))` for one of the victim's critics.
pub struct CriticObjective<'a> {
    pub policy: &'a Policy,
    pub critic: &'a ScaledNet,
    pub sign: f64,
}

impl AttackObjective for CriticObjective<'_> {
    fn dim(&self) -> usize {
        self.policy.state_dim()
    }

    fn value_and_gradient(&self, observation: &[f64]) -> Result<(f64, Vec<f64>)> {
        let action = self.policy.act_deterministic(observation)?;
        let x = [observation, &action[..]].concat();
        let (q, g) = self.critic.value_and_input_gradient(&x, &[self.sign])?;
        let (g_s, g_a) = g.split_at(observation.len());
        let (_, via_action) = self.policy.action_vjp(observation, g_a)?;
        let grad = g_s.iter().zip(&via_action).map(|(a, b)| a + b).collect();
        Ok((self.sign * q[0], grad))
    }
}

/// Critic-guided baselines. `fgsm` and `pgd` push the victim's reward
/// critic down, `max_reward` pushes it up and `max_cost` pushes the cost
/// critic up.
pub fn baseline_attack(
    kind: AttackKind,
    state: &[f64],
    victim: &PrivilegedVictim,
    config: &AttackConfig,
) -> Result<Perturbation> {
    config.validate()?;
    if !kind.is_baseline() {
        return Err(Error::InvalidConfig(format!("{kind} is not a critic-guided baseline")));
    }
    let critics = victim
        .critics
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig(format!("{kind} needs the victim's critics")))?;
    let (critic, sign) = match kind {
        AttackKind::Fgsm | AttackKind::Pgd => (&critics.q_r, -1.0),
        AttackKind::MaxReward => (&critics.q_r, 1.0),
        _ => (&critics.q_c, 1.0),
    };
    let objective = CriticObjective {
        policy: &victim.policy,
        critic,
        sign,
    };
    let (iterations, step) = if kind == AttackKind::Fgsm {
        (1, 1.0)
    } else {
        (config.iterations, config.step_size)
    };
    sign_ascent(
        state,
        &objective,
        config.epsilon,
        iterations,
        step,
        false,
        AccessLevel::Critics,
    )
}

/// Uniform offset from the budget box.
pub fn random_attack(state: &[f64], epsilon: f64, rng: &mut rng::Rng) -> Perturbation {
    let delta = state
        .iter()
        .map(|_| {
            if epsilon > 0.0 {
                rng.random_range(-epsilon..=epsilon)
            } else {
                0.0
            }
        })
        .collect();
    Perturbation {
        delta,
        iterations_used: 0,
        final_value: f64::NAN,
        access: AccessLevel::Blind,
        diagnostic: None,
    }
}
