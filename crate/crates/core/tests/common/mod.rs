//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use rand::Rng as _;
use safe_rl_attack::attacks::{sign_ascent, AccessLevel, AttackObjective};
use safe_rl_attack::expert::CriticPair;
use safe_rl_attack::icrl::{ConstraintModel, PsiInput};
use safe_rl_attack::nn::{Activation, DenseNet, ScaledNet, Standardizer};
use safe_rl_attack::policy::Policy;
use safe_rl_attack::rng;
use safe_rl_attack::sysid::DynamicsModel;
use safe_rl_attack::Result;

pub const FD_STEP: f64 = 1e-6;
/// Differences below this size are compared absolutely.
const REL_FLOOR: f64 = 1e-4;

pub fn central_diff<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut up = x.to_vec();
            let mut down = x.to_vec();
            up[i] += h;
            down[i] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a - b| / max(|a|, |b|, floor)` across the two vectors.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

fn random_vec(r: &mut rng::Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-scale..scale)).collect()
}

/// A random smooth network: 1-2 hidden layers, tanh or sigmoid hidden
/// units, identity, tanh or sigmoid output.
pub fn random_net(seed: u64) -> DenseNet {
    let mut r = rng::derived(seed, 0x9a);
    let mut sizes = vec![r.random_range(1..=8)];
    for _ in 0..r.random_range(1..=2) {
        sizes.push(r.random_range(2..=12));
    }
    sizes.push(r.random_range(1..=4));
    let hidden = [Activation::Tanh, Activation::Sigmoid][r.random_range(0..2)];
    let output = [Activation::Identity, Activation::Tanh, Activation::Sigmoid][r.random_range(0..3)];
    DenseNet::new(&sizes, hidden, output, &mut r).unwrap()
}

/// Input and parameter gradients of `weighting · net(x)` against central
/// differences. Returns the worst relative error.
pub fn dense_net_gradient_error(seed: u64) -> f64 {
    let net = random_net(seed);
    let mut r = rng::derived(seed, 0x9b);
    let x = random_vec(&mut r, net.input_dim(), 1.5);
    let w = random_vec(&mut r, net.output_dim(), 1.0);
    let dot = |n: &DenseNet, x: &[f64]| -> f64 { n.forward(x).unwrap().iter().zip(&w).map(|(y, w)| y * w).sum() };
    let report = net.gradients(&x, &w).unwrap();
    let fd_input = central_diff(|z| dot(&net, z), &x, FD_STEP);
    let fd_params = central_diff(
        |theta| {
            let mut n = net.clone();
            n.weights_mut().copy_from_slice(theta);
            dot(&n, &x)
        },
        net.weights(),
        FD_STEP,
    );
    max_rel_err(&report.input_grad, &fd_input).max(max_rel_err(&report.param_grad, &fd_params))
}

fn random_scaler(r: &mut rng::Rng, dim: usize) -> Standardizer {
    let mean = random_vec(r, dim, 1.0);
    let scale = (0..dim).map(|_| r.random_range(0.5..3.0)).collect();
    Standardizer::new(mean, scale).unwrap()
}

fn noisy(net: &mut DenseNet, r: &mut rng::Rng) {
    for w in net.weights_mut() {
        *w += r.random_range(-0.3..0.3);
    }
}

/// The learning components built from one seed: a policy, a critic, a
/// constraint network in each input mode and a dynamics model. Output
/// layers are perturbed away from their zero or near-zero initialisation so
/// every layer contributes.
pub fn model_gradient_error(seed: u64) -> Result<f64> {
    let mut r = rng::derived(seed, 0x9c);
    let (sd, ad) = (4, 2);
    let s = random_vec(&mut r, sd, 1.0);
    let a = random_vec(&mut r, ad, 0.8);
    let mut worst: f64 = 0.0;

    let mut policy = Policy::new(random_scaler(&mut r, sd), &[8, 8], vec![(-1.0, 1.0); ad], 0.2, &mut r)?;
    noisy(&mut policy.model.net, &mut r);
    let w = random_vec(&mut r, ad, 1.0);
    let (_, g) = policy.action_vjp(&s, &w)?;
    let fd = central_diff(
        |z| {
            policy
                .act_deterministic(z)
                .unwrap()
                .iter()
                .zip(&w)
                .map(|(x, w)| x * w)
                .sum()
        },
        &s,
        FD_STEP,
    );
    worst = worst.max(max_rel_err(&g, &fd));

    let critic = ScaledNet::with_input_scaling(
        random_scaler(&mut r, sd + ad),
        DenseNet::new(&[sd + ad, 8, 1], Activation::Tanh, Activation::Identity, &mut r)?,
    )?;
    let pair = CriticPair {
        q_r: critic.clone(),
        q_c: critic,
    };
    let sa: Vec<f64> = s.iter().chain(&a).copied().collect();
    let g = pair.q_r.input_gradient(&sa, &[1.0])?;
    let fd = central_diff(|z| pair.q_r.forward(z).unwrap()[0], &sa, FD_STEP);
    worst = worst.max(max_rel_err(&g, &fd));

    for mode in [PsiInput::StateAction, PsiInput::NextState] {
        let width = match mode {
            PsiInput::StateAction => sd + ad,
            PsiInput::NextState => sd + ad,
        };
        let mut psi = ConstraintModel::new(random_scaler(&mut r, width), sd, &[8], 0.5, 0.0, mode, &mut r)?;
        noisy(&mut psi.model.net, &mut r);
        let (_, g_s, g_a) = psi.value_and_gradient(&s, &a)?;
        let fd_s = central_diff(|z| psi.value(z, &a).unwrap(), &s, FD_STEP);
        let fd_a = central_diff(|z| psi.value(&s, z).unwrap(), &a, FD_STEP);
        worst = worst.max(max_rel_err(&g_s, &fd_s)).max(max_rel_err(&g_a, &fd_a));
    }

    let mut net = DenseNet::new(&[sd + ad, 8, sd], Activation::Tanh, Activation::Identity, &mut r)?;
    noisy(&mut net, &mut r);
    let model = ScaledNet::new(random_scaler(&mut r, sd + ad), random_scaler(&mut r, sd), net)?;
    let dynamics = DynamicsModel::from_model(model, sd)?;
    let w = random_vec(&mut r, sd, 1.0);
    let (_, g_s, g_a) = dynamics.predict_vjp(&s, &a, &w)?;
    let dot =
        |s: &[f64], a: &[f64]| -> f64 { dynamics.predict(s, a).unwrap().iter().zip(&w).map(|(x, w)| x * w).sum() };
    worst = worst
        .max(max_rel_err(&g_s, &central_diff(|z| dot(z, &a), &s, FD_STEP)))
        .max(max_rel_err(&g_a, &central_diff(|z| dot(&s, z), &a, FD_STEP)));
    Ok(worst)
}

/// Smooth 2-D test objective: a linear trend, a bounded quadratic and a
/// low-frequency ripple, with curvature at most a few units.
pub struct SyntheticObjective {
    pub linear: [f64; 2],
    pub hessian: [[f64; 2]; 2],
    pub ripple: (f64, [f64; 2], f64),
}

impl SyntheticObjective {
    pub fn from_seed(seed: u64) -> Self {
        let mut r = rng::derived(seed, 0x1e1);
        let h01 = r.random_range(-1.0..1.0);
        Self {
            linear: [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)],
            hessian: [[r.random_range(-2.0..2.0), h01], [h01, r.random_range(-2.0..2.0)]],
            ripple: (
                r.random_range(0.0..0.1),
                [r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)],
                r.random_range(0.0..std::f64::consts::TAU),
            ),
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let (amp, freq, phase) = self.ripple;
        let quad = 0.5
            * (self.hessian[0][0] * x[0] * x[0]
                + 2.0 * self.hessian[0][1] * x[0] * x[1]
                + self.hessian[1][1] * x[1] * x[1]);
        self.linear[0] * x[0] + self.linear[1] * x[1] + quad + amp * (freq[0] * x[0] + freq[1] * x[1] + phase).sin()
    }
}

impl AttackObjective for SyntheticObjective {
    fn dim(&self) -> usize {
        2
    }

    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (amp, freq, phase) = self.ripple;
        let c = amp * (freq[0] * x[0] + freq[1] * x[1] + phase).cos();
        let g = vec![
            self.linear[0] + self.hessian[0][0] * x[0] + self.hessian[0][1] * x[1] + c * freq[0],
            self.linear[1] + self.hessian[0][1] * x[0] + self.hessian[1][1] * x[1] + c * freq[1],
        ];
        Ok((self.value(x), g))
    }
}

pub struct GridCheck {
    pub ascent_value: f64,
    pub grid_best: f64,
    pub tolerance: f64,
}

impl GridCheck {
    pub fn holds(&self) -> bool {
        self.grid_best - self.ascent_value <= self.tolerance
    }
}

/// Run the signed ascent from a seeded start and compare its final value
/// with an exhaustive grid over the budget box at pitch `epsilon / 50`.
pub fn ascent_grid_check(seed: u64, epsilon: f64, iterations: usize, step_size: f64) -> GridCheck {
    let objective = SyntheticObjective::from_seed(seed);
    let mut r = rng::derived(seed, 0x1e2);
    let start = vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
    let p = sign_ascent(
        &start,
        &objective,
        epsilon,
        iterations,
        step_size,
        true,
        AccessLevel::Trajectories,
    )
    .unwrap();
    let ascent: Vec<f64> = start.iter().zip(&p.delta).map(|(s, d)| s + d).collect();
    let pitch = epsilon / 50.0;
    let mut grid_best = f64::NEG_INFINITY;
    for i in 0..=100 {
        for j in 0..=100 {
            let x = [
                start[0] - epsilon + i as f64 * pitch,
                start[1] - epsilon + j as f64 * pitch,
            ];
            grid_best = grid_best.max(objective.value(&x));
        }
    }
    GridCheck {
        ascent_value: objective.value(&ascent),
        grid_best,
        tolerance: 10.0 * step_size * epsilon * epsilon,
    }
}

/// A randomly initialised victim whose actions actually vary with the
/// observation.
pub fn toy_policy(seed: u64) -> Policy {
    let mut r = rng::derived(seed, 0x70);
    let mut p = Policy::new(Standardizer::identity(4), &[8], vec![(-1.0, 1.0); 2], 0.1, &mut r).unwrap();
    for w in p.model.net.weights_mut() {
        *w *= 20.0;
    }
    p
}

/// Untrained but non-degenerate surrogate models.
pub fn toy_surrogate(seed: u64) -> safe_rl_attack::attacks::SurrogateModels {
    let mut r = rng::derived(seed, 0x71);
    let dyn_net = DenseNet::new(&[6, 8, 4], Activation::Tanh, Activation::Identity, &mut r).unwrap();
    let dynamics = DynamicsModel::from_model(
        ScaledNet::with_input_scaling(Standardizer::identity(6), dyn_net).unwrap(),
        4,
    )
    .unwrap();
    let constraint = ConstraintModel::new(
        Standardizer::identity(6),
        4,
        &[8],
        0.5,
        0.0,
        PsiInput::StateAction,
        &mut r,
    )
    .unwrap();
    safe_rl_attack::attacks::SurrogateModels {
        learner: toy_policy(seed ^ 0xfeed),
        dynamics,
        constraint,
    }
}

/// A configuration small enough to run the whole command chain in about
/// a second.
pub const TINY_CONFIG: &str = r#"
env = "BallRun"
seed = 3

[demos]
episodes = 6

[evaluation]
episodes = 2

[expert]
epochs = 2
eval_every = 1
eval_episodes = 1

[expert.ppo]
hidden = [8]
episodes_per_epoch = 2

[expert.critic]
hidden = [8]
episodes = 2
epochs = 1

[icrl]
outer_epochs = 1
inner_epochs = 1
snapshot_episodes = 2
warm_start_epochs = 1

[icrl.ppo]
hidden = [8]
episodes_per_epoch = 2

[icrl.constraint]
hidden = [8]

[sysid]
hidden = [8]
epochs = 1
min_transitions = 100

[attack]
iterations = 2

[bounds]
episodes = 2
draws = 20
"#;
