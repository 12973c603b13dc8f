//! Lipschitz estimates and the perturbation bounds built on them.
//!
//! A budget `eps` in the infinity norm can raise the learned per-step cost by
//! at most `L_psi * eps`; over an episode the deviation compounds through the
//! dynamics, giving `L_psi * eps * sum_{t=1..T} L_f^(t-1)`. The estimators
//! here are sampled, so they bound the true constants from below and every
//! audit reports its miss rate.

use std::fmt::Write as _;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::envs::{EnvKind, EnvSpec, Transition};
use crate::error::{check_dim, Error, Result};
use crate::icrl::{ConstraintModel, PsiInput};
use crate::policy::Policy;
use crate::rng;

/// Tolerance on floating-point comparisons in bound checks.
pub const BOUND_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LipschitzTarget {
    Psi,
    Dynamics,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LipschitzMethod {
    /// Largest finite-difference slope over sampled pairs.
    PairRatio,
    /// Largest L1 gradient norm (dual of the infinity norm).
    #[default]
    GradNormMax,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LipschitzEstimate {
    pub value: f64,
    pub target: LipschitzTarget,
    /// Draws that contributed (zero-length offsets are skipped).
    pub samples: usize,
    pub radius: f64,
    pub method: LipschitzMethod,
}

/// Offset inside the infinity ball of `radius`. Every fourth draw is a cube
/// vertex, where slopes of near-linear maps peak; the rest are uniform.
pub fn draw_perturbation(dim: usize, radius: f64, index: usize, rng: &mut rng::Rng) -> Vec<f64> {
    if index % 4 == 3 {
        (0..dim)
            .map(|_| if rng.random::<bool>() { radius } else { -radius })
            .collect()
    } else {
        (0..dim).map(|_| rng.random_range(-radius..=radius)).collect()
    }
}

/// A differentiable scalar function of the state.
pub trait ScalarField {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> Result<f64>;
    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// `s -> psi(s, policy(s))`: the learned cost of the state a policy is in,
/// with the policy's own response. In next-state mode the action slot is
/// zero and the policy plays no part.
pub struct OnPolicyPsi<'a> {
    pub psi: &'a ConstraintModel,
    pub policy: &'a Policy,
}

impl ScalarField for OnPolicyPsi<'_> {
    fn dim(&self) -> usize {
        self.psi.state_dim
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        match self.psi.input {
            PsiInput::StateAction => self.psi.value(x, &self.policy.act_deterministic(x)?),
            PsiInput::NextState => self.psi.value(x, &vec![0.0; self.psi.action_dim()]),
        }
    }

    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        match self.psi.input {
            PsiInput::StateAction => {
                let a = self.policy.act_deterministic(x)?;
                let (v, mut g_s, g_a) = self.psi.value_and_gradient(x, &a)?;
                let (_, through_action) = self.policy.action_vjp(x, &g_a)?;
                for (g, t) in g_s.iter_mut().zip(&through_action) {
                    *g += t;
                }
                Ok((v, g_s))
            }
            PsiInput::NextState => {
                let (v, g_s, _) = self.psi.value_and_gradient(x, &vec![0.0; self.psi.action_dim()])?;
                Ok((v, g_s))
            }
        }
    }
}

fn l1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

fn linf(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Estimate the infinity-norm Lipschitz constant of `field` around `samples`.
///
/// Both methods walk the same seeded stream of `(sample, offset)` draws, so
/// estimates are comparable and never decrease as `draws` grows. Gradient
/// norms are taken at both ends and the midpoint of each pair.
pub fn estimate_psi_lipschitz(
    field: &dyn ScalarField,
    samples: &[Vec<f64>],
    radius: f64,
    method: LipschitzMethod,
    draws: usize,
    seed: u64,
) -> Result<LipschitzEstimate> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("no state samples".into()));
    }
    if !(radius > 0.0) {
        return Err(Error::InvalidConfig(format!("radius {radius} must be positive")));
    }
    for s in samples {
        check_dim("lipschitz sample", field.dim(), s.len())?;
    }
    let mut r = rng::derived(seed, 0x11f);
    let mut best: f64 = 0.0;
    let mut used = 0;
    for i in 0..draws {
        let s = &samples[r.random_range(0..samples.len())];
        let u = draw_perturbation(s.len(), radius, i, &mut r);
        let norm = linf(&u);
        if norm == 0.0 {
            continue;
        }
        let moved: Vec<f64> = s.iter().zip(&u).map(|(x, d)| x + d).collect();
        let slope = match method {
            LipschitzMethod::PairRatio => (field.value(&moved)? - field.value(s)?).abs() / norm,
            LipschitzMethod::GradNormMax => {
                let mid: Vec<f64> = s.iter().zip(&u).map(|(x, d)| x + 0.5 * d).collect();
                let mut m: f64 = 0.0;
                for p in [s.as_slice(), &mid, &moved] {
                    m = m.max(l1(&field.value_and_gradient(p)?.1));
                }
                m
            }
        };
        if !slope.is_finite() {
            return Err(Error::NonFinite("lipschitz slope".into()));
        }
        best = best.max(slope);
        used += 1;
    }
    Ok(LipschitzEstimate {
        value: best,
        target: LipschitzTarget::Psi,
        samples: used,
        radius,
        method,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OneStepCheck {
    pub holds: bool,
    /// `psi_clean + L_psi * eps - psi_perturbed`; negative on a miss.
    pub slack: f64,
}

/// Compare the learned cost after a perturbation against the one-step bound.
///
/// `clean_action` and `perturbed_action` are what the victim actually did on
/// the clean and perturbed observations.
pub fn one_step_bound_check(
    psi: &ConstraintModel,
    state: &[f64],
    clean_action: &[f64],
    delta: &[f64],
    perturbed_action: &[f64],
    lipschitz: f64,
    epsilon: f64,
) -> Result<OneStepCheck> {
    check_dim("perturbation", state.len(), delta.len())?;
    if linf(delta) > epsilon {
        return Err(Error::InvalidConfig(format!(
            "perturbation norm {} exceeds budget {epsilon}",
            linf(delta)
        )));
    }
    let moved: Vec<f64> = state.iter().zip(delta).map(|(s, d)| s + d).collect();
    let before = state_cost(psi, state, clean_action)?;
    let after = state_cost(psi, &moved, perturbed_action)?;
    let slack = before + lipschitz * epsilon - after;
    Ok(OneStepCheck {
        holds: slack >= -BOUND_TOLERANCE,
        slack,
    })
}

/// Learned cost of being in `state` and taking `action`, honouring the
/// model's input convention.
pub fn state_cost(psi: &ConstraintModel, state: &[f64], action: &[f64]) -> Result<f64> {
    match psi.input {
        PsiInput::StateAction => psi.value(state, action),
        PsiInput::NextState => psi.value(state, &vec![0.0; psi.action_dim()]),
    }
}

fn check_bound_inputs(l_psi: f64, l_f: f64, epsilon: f64, horizon: usize) -> Result<()> {
    if horizon == 0 {
        return Err(Error::InvalidConfig("horizon must be at least 1".into()));
    }
    for (name, v) in [("L_psi", l_psi), ("L_f", l_f), ("epsilon", epsilon)] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "{name} = {v} must be finite and non-negative"
            )));
        }
    }
    Ok(())
}

/// `sum_{t=1..T} L_f^(t-1)`, term by term (the first term is 1 even when
/// `L_f = 0`).
pub fn compounding_factor(l_f: f64, horizon: usize) -> f64 {
    let mut term = 1.0;
    let mut sum = 0.0;
    for _ in 0..horizon {
        sum += term;
        term *= l_f;
    }
    sum
}

/// Largest episodic increase of the learned cost a budget of `epsilon` can
/// cause over `horizon` steps.
pub fn episodic_bound(l_psi: f64, l_f: f64, epsilon: f64, horizon: usize) -> Result<f64> {
    check_bound_inputs(l_psi, l_f, epsilon, horizon)?;
    Ok(l_psi * epsilon * compounding_factor(l_f, horizon))
}

/// Budget at which [`episodic_bound`] reaches `target_increase`.
pub fn required_epsilon(target_increase: f64, l_psi: f64, l_f: f64, horizon: usize) -> Result<f64> {
    if !(target_increase >= 0.0) || !target_increase.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "target increase {target_increase} must be finite and non-negative"
        )));
    }
    check_bound_inputs(l_psi, l_f, 0.0, horizon)?;
    if l_psi == 0.0 {
        return Err(Error::Undefined(
            "a constant learned cost cannot be raised by any budget".into(),
        ));
    }
    Ok(target_increase / (l_psi * compounding_factor(l_f, horizon)))
}

/// One step as the victim experienced it: the observation it was shown and
/// the action it took.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservedStep {
    pub observation: Vec<f64>,
    pub action: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundReport {
    pub baseline: f64,
    pub observed: f64,
    pub bound: f64,
    pub holds: bool,
    pub l_psi: f64,
    pub l_f: f64,
    pub epsilon: f64,
    pub horizon: usize,
}

/// Compare the learned episodic cost of an attacked run with the clean run
/// from the same seed plus the episodic bound. Runs of unequal length are
/// truncated to the shorter.
pub fn episodic_bound_audit(
    attacked: &[ObservedStep],
    clean: &[ObservedStep],
    psi: &ConstraintModel,
    l_psi: f64,
    l_f: f64,
    epsilon: f64,
) -> Result<BoundReport> {
    let horizon = attacked.len().min(clean.len());
    if horizon == 0 {
        return Err(Error::EmptyBatch);
    }
    let sum = |steps: &[ObservedStep]| -> Result<f64> {
        steps[..horizon]
            .iter()
            .map(|s| state_cost(psi, &s.observation, &s.action))
            .sum()
    };
    let observed = sum(attacked)?;
    let baseline = sum(clean)?;
    let bound = episodic_bound(l_psi, l_f, epsilon, horizon)?;
    Ok(BoundReport {
        baseline,
        observed,
        bound,
        holds: observed <= baseline + bound + BOUND_TOLERANCE,
        l_psi,
        l_f,
        epsilon,
        horizon,
    })
}

pub const BOUND_CSV_HEADER: &str = "env,epsilon,L_psi,L_f,T,baseline,observed,bound,holds,miss_rate";

/// One CSV row; `miss_rate` is the fraction of audited episodes in the
/// same batch whose report does not hold.
pub fn bound_csv_row(env: EnvKind, report: &BoundReport, miss_rate: f64) -> String {
    format!(
        "{},{:?},{:?},{:?},{},{:?},{:?},{:?},{},{:?}",
        env,
        report.epsilon,
        report.l_psi,
        report.l_f,
        report.horizon,
        report.baseline,
        report.observed,
        report.bound,
        report.holds,
        miss_rate
    )
}

pub fn bound_csv(env: EnvKind, reports: &[BoundReport]) -> String {
    let misses = reports.iter().filter(|r| !r.holds).count();
    let rate = if reports.is_empty() {
        0.0
    } else {
        misses as f64 / reports.len() as f64
    };
    let mut out = format!("{BOUND_CSV_HEADER}\n");
    for r in reports {
        writeln!(out, "{}", bound_csv_row(env, r, rate)).unwrap();
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransferReport {
    /// Largest gap between learned and true per-step cost on the
    /// calibration steps.
    pub max_error: f64,
    pub threshold: f64,
    /// Steps the learned cost flags as violations.
    pub flagged: usize,
    /// Flagged steps that truly violate.
    pub confirmed: usize,
    /// `confirmed / flagged`; `None` when nothing was flagged.
    pub transfer_rate: Option<f64>,
}

impl TransferReport {
    /// Whether the threshold clears the calibration error, the premise under
    /// which a flagged step must be a true violation.
    pub fn premise_holds(&self) -> bool {
        self.threshold > self.max_error
    }

    pub fn rate_or_zero(&self) -> f64 {
        self.transfer_rate.unwrap_or(0.0)
    }
}

/// Anything that scores a step with a cost in `[0, 1]`.
pub trait StepCostModel {
    fn step_cost(&self, state: &[f64], action: &[f64], next_state: &[f64]) -> Result<f64>;
}

impl StepCostModel for ConstraintModel {
    fn step_cost(&self, state: &[f64], action: &[f64], next_state: &[f64]) -> Result<f64> {
        ConstraintModel::step_cost(self, state, action, next_state)
    }
}

/// How often steps the learned cost calls violations really are violations.
pub fn transferability_check(
    psi: &dyn StepCostModel,
    spec: &EnvSpec,
    attacked: &[Transition],
    calibration: &[Transition],
    threshold: f64,
) -> Result<TransferReport> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "threshold {threshold} must lie in (0, 1)"
        )));
    }
    if attacked.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let truth = |t: &Transition| crate::envs::ground_truth_cost(spec, &t.state, &t.action, &t.next_state);
    let mut max_error: f64 = 0.0;
    for t in calibration {
        let v = psi.step_cost(&t.state, &t.action, &t.next_state)?;
        max_error = max_error.max((v - truth(t)).abs());
    }
    let mut flagged = 0;
    let mut confirmed = 0;
    for t in attacked {
        if psi.step_cost(&t.state, &t.action, &t.next_state)? > threshold {
            flagged += 1;
            if truth(t) >= 1.0 {
                confirmed += 1;
            }
        }
    }
    Ok(TransferReport {
        max_error,
        threshold,
        flagged,
        confirmed,
        transfer_rate: (flagged > 0).then(|| confirmed as f64 / flagged as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, DenseNet, ScaledNet, Standardizer};

    struct Linear(Vec<f64>);

    impl ScalarField for Linear {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn value(&self, x: &[f64]) -> Result<f64> {
            Ok(self.0.iter().zip(x).map(|(w, x)| w * x).sum())
        }
        fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
            Ok((self.value(x)?, self.0.clone()))
        }
    }

    struct Constant;

    impl ScalarField for Constant {
        fn dim(&self) -> usize {
            2
        }
        fn value(&self, _: &[f64]) -> Result<f64> {
            Ok(0.3)
        }
        fn value_and_gradient(&self, _: &[f64]) -> Result<(f64, Vec<f64>)> {
            Ok((0.3, vec![0.0, 0.0]))
        }
    }

    fn samples() -> Vec<Vec<f64>> {
        (0..30).map(|i| vec![i as f64 * 0.1, -(i as f64) * 0.05, 1.0]).collect()
    }

    #[test]
    fn linear_field_slopes() {
        let f = Linear(vec![0.5, -2.0, 1.0]);
        let pr = estimate_psi_lipschitz(&f, &samples(), 0.1, LipschitzMethod::PairRatio, 10_000, 1).unwrap();
        assert!((pr.value - 3.5).abs() <= 0.035 && pr.value <= 3.5 + 1e-9);
        let gn = estimate_psi_lipschitz(&f, &samples(), 0.1, LipschitzMethod::GradNormMax, 10, 1).unwrap();
        assert!((gn.value - 3.5).abs() < 1e-12);
    }

    #[test]
    fn constant_field_has_zero_slope() {
        let s = vec![vec![0.0, 1.0]; 3];
        for m in [LipschitzMethod::PairRatio, LipschitzMethod::GradNormMax] {
            assert_eq!(
                estimate_psi_lipschitz(&Constant, &s, 0.5, m, 100, 0).unwrap().value,
                0.0
            );
        }
    }

    #[test]
    fn zero_radius_rejected() {
        assert!(estimate_psi_lipschitz(&Constant, &[vec![0.0, 0.0]], 0.0, LipschitzMethod::PairRatio, 1, 0).is_err());
    }

    #[test]
    fn bound_examples() {
        assert!((episodic_bound(0.1, 0.5, 0.1, 3).unwrap() - 0.0175).abs() < 1e-15);
        assert_eq!(episodic_bound(0.3, 0.0, 0.2, 50).unwrap(), 0.3 * 0.2);
        assert!((episodic_bound(0.2, 1.0, 0.05, 10).unwrap() - 0.1).abs() < 1e-15);
        assert!(episodic_bound(-0.1, 0.5, 0.1, 3).is_err());
        assert!(episodic_bound(0.1, 0.5, 0.1, 0).is_err());
    }

    #[test]
    fn required_epsilon_examples() {
        assert!((required_epsilon(0.0175, 0.1, 0.5, 3).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(required_epsilon(0.0, 0.1, 0.5, 3).unwrap(), 0.0);
        assert!(matches!(required_epsilon(1.0, 0.0, 0.5, 3), Err(Error::Undefined(_))));
    }

    fn identity_psi() -> ConstraintModel {
        // psi(s, a) = sigmoid(s0): monotone in the first state entry.
        let mut net = DenseNet::zeros(&[3, 1], Activation::Identity, Activation::Sigmoid).unwrap();
        net.weights_mut()[0] = 1.0;
        let model = ScaledNet::with_input_scaling(Standardizer::identity(3), net).unwrap();
        ConstraintModel::from_model(model, 2, 0.5, 0.0, PsiInput::StateAction).unwrap()
    }

    #[test]
    fn zero_perturbation_keeps_full_slack() {
        let psi = identity_psi();
        let c = one_step_bound_check(&psi, &[0.2, 0.1], &[0.0], &[0.0, 0.0], &[0.0], 0.25, 0.1).unwrap();
        assert!(c.holds);
        assert!((c.slack - 0.025).abs() < 1e-15);
    }

    #[test]
    fn known_slope_always_holds() {
        let psi = identity_psi();
        let mut r = rng::seeded(4);
        // The sigmoid slope never exceeds 1/4.
        for _ in 0..1000 {
            let s = [r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)];
            let d = [r.random_range(-0.1..=0.1), r.random_range(-0.1..=0.1)];
            assert!(
                one_step_bound_check(&psi, &s, &[0.0], &d, &[0.0], 0.25, 0.1)
                    .unwrap()
                    .holds
            );
        }
    }

    #[test]
    fn audit_with_zero_budget_matches_baseline() {
        let psi = identity_psi();
        let steps: Vec<ObservedStep> = (0..10)
            .map(|i| ObservedStep {
                observation: vec![i as f64 * 0.1, 0.0],
                action: vec![0.0],
            })
            .collect();
        let rep = episodic_bound_audit(&steps, &steps, &psi, 0.25, 1.1, 0.0).unwrap();
        assert_eq!(rep.observed, rep.baseline);
        assert_eq!(rep.bound, 0.0);
        assert!(rep.holds);
        let inflated = episodic_bound_audit(&steps, &steps[..4], &psi, 0.25, 3.0, 0.1).unwrap();
        assert_eq!(inflated.horizon, 4);
        assert!((inflated.bound - 0.25 * 0.1 * 40.0).abs() < 1e-12);
    }

    struct Truth(EnvSpec);

    impl StepCostModel for Truth {
        fn step_cost(&self, s: &[f64], a: &[f64], n: &[f64]) -> Result<f64> {
            Ok(crate::envs::ground_truth_cost(&self.0, s, a, n))
        }
    }

    struct Half;

    impl StepCostModel for Half {
        fn step_cost(&self, _: &[f64], _: &[f64], _: &[f64]) -> Result<f64> {
            Ok(0.5)
        }
    }

    fn random_steps(spec: &EnvSpec, n: usize) -> Vec<Transition> {
        let mut r = rng::seeded(8);
        (0..n)
            .map(|_| {
                let s: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
                let a = vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
                crate::envs::step(spec, &s, &a).unwrap()
            })
            .collect()
    }

    #[test]
    fn perfect_surrogate_transfers_fully() {
        let spec = EnvSpec::new(EnvKind::PointPosition);
        let steps = random_steps(&spec, 400);
        for eta in [0.1, 0.5, 0.9] {
            let rep = transferability_check(&Truth(spec.clone()), &spec, &steps, &steps, eta).unwrap();
            assert_eq!(rep.max_error, 0.0);
            assert_eq!(rep.transfer_rate, Some(1.0));
            assert!(rep.premise_holds());
        }
    }

    #[test]
    fn constant_surrogate_reports_base_rate() {
        let spec = EnvSpec::new(EnvKind::PointPosition);
        let steps = random_steps(&spec, 400);
        let rep = transferability_check(&Half, &spec, &steps, &steps, 0.4).unwrap();
        let base = steps.iter().filter(|t| t.cost >= 1.0).count() as f64 / steps.len() as f64;
        assert_eq!(rep.flagged, steps.len());
        assert_eq!(rep.transfer_rate, Some(base));
        let none = transferability_check(&Half, &spec, &steps, &steps, 0.6).unwrap();
        assert_eq!(none.transfer_rate, None);
        assert_eq!(none.rate_or_zero(), 0.0);
    }

    #[test]
    fn csv_has_declared_columns() {
        let rep = BoundReport {
            baseline: 1.0,
            observed: 1.5,
            bound: 2.0,
            holds: true,
            l_psi: 0.5,
            l_f: 1.1,
            epsilon: 0.1,
            horizon: 200,
        };
        let text = bound_csv(EnvKind::PointVelocity, &[rep]);
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), BOUND_CSV_HEADER);
        assert_eq!(lines.next().unwrap().split(',').count(), 10);
    }
}
