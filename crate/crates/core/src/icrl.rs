//! Constraint inference from demonstrations.
//!
//! The attacker sees expert trajectories and can reset and step the
//! environment, nothing more. From that it alternates two updates: a learner
//! policy trained with a Lagrangian penalty on the learned cost (budgeted at
//! the expert's learned cost), and a constraint network pushed up on learner
//! behaviour and down on expert behaviour.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::envs::{BlackBoxEnv, EnvKind, Trajectory};
use crate::error::{check_dim, Error, Result};
use crate::nn::{Activation, Adam, AdamConfig, DenseNet, ScaledNet, Standardizer, Trace};
use crate::policy::Policy;
use crate::ppo::{EpochStats, PpoConfig, PpoLagrangian};
use crate::rng;

/// What the constraint network reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiInput {
    /// `(state, action)` of the step being judged.
    #[default]
    StateAction,
    /// `(next_state, 0)`: the state the step lands in, with a zero action.
    NextState,
}

/// One observed step without reward or cost.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSample {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
}

/// Learned per-step cost in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintModel {
    /// Sigmoid-output network over the concatenated feature vector.
    pub model: ScaledNet,
    /// Values above this count as a predicted violation.
    pub threshold: f64,
    pub l2_coeff: f64,
    pub input: PsiInput,
    pub state_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstraintMeta {
    threshold: f64,
    l2_coeff: f64,
    input: PsiInput,
    state_dim: usize,
}

impl ConstraintModel {
    pub fn new(
        feature_scaler: Standardizer,
        state_dim: usize,
        hidden: &[usize],
        threshold: f64,
        l2_coeff: f64,
        input: PsiInput,
        rng: &mut rng::Rng,
    ) -> Result<Self> {
        let mut sizes = vec![feature_scaler.dim()];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut net = DenseNet::new(&sizes, Activation::Tanh, Activation::Sigmoid, rng)?;
        net.set_output_bias(&[0.0])?;
        let model = ScaledNet::with_input_scaling(feature_scaler, net)?;
        Self::from_model(model, state_dim, threshold, l2_coeff, input)
    }

    pub fn from_model(
        model: ScaledNet,
        state_dim: usize,
        threshold: f64,
        l2_coeff: f64,
        input: PsiInput,
    ) -> Result<Self> {
        check_dim("constraint output", 1, model.output_dim())?;
        if model.input_dim() <= state_dim {
            return Err(Error::InvalidConfig(format!(
                "constraint input width {} leaves no room for an action after {state_dim} state entries",
                model.input_dim()
            )));
        }
        if model.net.activations().last() != Some(&Activation::Sigmoid) {
            return Err(Error::InvalidConfig("constraint network must end in a sigmoid".into()));
        }
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "threshold {threshold} must lie in (0, 1)"
            )));
        }
        if !(l2_coeff >= 0.0) {
            return Err(Error::InvalidConfig("l2_coeff must be non-negative".into()));
        }
        Ok(Self {
            model,
            threshold,
            l2_coeff,
            input,
            state_dim,
        })
    }

    pub fn action_dim(&self) -> usize {
        self.model.input_dim() - self.state_dim
    }

    /// The feature vector a step is judged on.
    pub fn features(&self, state: &[f64], action: &[f64], next_state: &[f64]) -> Vec<f64> {
        match self.input {
            PsiInput::StateAction => [state, action].concat(),
            PsiInput::NextState => {
                let mut x = next_state.to_vec();
                x.resize(self.state_dim + self.action_dim(), 0.0);
                x
            }
        }
    }

    /// `psi` on a raw `(state, action)` pair, regardless of mode.
    pub fn value(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        check_dim("constraint state", self.state_dim, state.len())?;
        check_dim("constraint action", self.action_dim(), action.len())?;
        Ok(self.model.forward(&[state, action].concat())?[0])
    }

    /// Learned cost of one step under the configured mode.
    pub fn step_cost(&self, state: &[f64], action: &[f64], next_state: &[f64]) -> Result<f64> {
        let x = self.features(state, action, next_state);
        check_dim("constraint features", self.model.input_dim(), x.len())?;
        Ok(self.model.forward(&x)?[0])
    }

    pub fn sample_cost(&self, s: &StepSample) -> Result<f64> {
        self.step_cost(&s.state, &s.action, &s.next_state)
    }

    /// `(psi, dpsi/dstate, dpsi/daction)` at a raw `(state, action)` pair.
    pub fn value_and_gradient(&self, state: &[f64], action: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        check_dim("constraint state", self.state_dim, state.len())?;
        check_dim("constraint action", self.action_dim(), action.len())?;
        let (out, mut g) = self.model.value_and_input_gradient(&[state, action].concat(), &[1.0])?;
        let g_a = g.split_off(self.state_dim);
        Ok((out[0], g, g_a))
    }

    pub fn violates(&self, value: f64) -> bool {
        value > self.threshold
    }

    /// Writes `<path>`, `<path>.scale` and `<path>.meta`.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.model.save(path)?;
        let meta = ConstraintMeta {
            threshold: self.threshold,
            l2_coeff: self.l2_coeff,
            input: self.input,
            state_dim: self.state_dim,
        };
        let text = toml::to_string(&meta).map_err(|e| Error::parse("constraint meta", e.to_string()))?;
        std::fs::write(meta_path(path), text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let model = ScaledNet::load(path)?;
        let mp = meta_path(path);
        if !mp.exists() {
            return Err(Error::MissingArtifact(mp));
        }
        let meta: ConstraintMeta = toml::from_str(&std::fs::read_to_string(mp)?)
            .map_err(|e| Error::parse("constraint meta", e.to_string()))?;
        Self::from_model(model, meta.state_dim, meta.threshold, meta.l2_coeff, meta.input)
    }
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    s.into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstraintConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub l2_coeff: f64,
    pub threshold: f64,
    pub input: PsiInput,
    /// Rows per minibatch, drawn separately from the expert set and from
    /// every retained learner snapshot.
    pub batch_size: usize,
    /// Gradient steps making up one inner epoch.
    pub steps_per_epoch: usize,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            lr: 3e-4,
            l2_coeff: 1e-3,
            threshold: 0.5,
            input: PsiInput::StateAction,
            batch_size: 256,
            steps_per_epoch: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcrlConfig {
    /// Alternation rounds (learner update, then constraint update).
    pub outer_epochs: usize,
    /// Constraint-network epochs per round.
    pub inner_epochs: usize,
    /// Policy-gradient epochs per round.
    pub learner_epochs: usize,
    /// Learner episodes sampled into each history snapshot.
    pub snapshot_episodes: usize,
    /// Snapshots retained for the constraint objective.
    pub history_cap: usize,
    /// Behaviour-cloning epochs on the demonstrations before the first round.
    pub warm_start_epochs: usize,
    pub seed: u64,
    pub ppo: PpoConfig,
    pub constraint: ConstraintConfig,
}

impl Default for IcrlConfig {
    fn default() -> Self {
        Self {
            outer_epochs: 20,
            inner_epochs: 10,
            learner_epochs: 2,
            snapshot_episodes: 8,
            history_cap: 5,
            warm_start_epochs: 40,
            seed: 0,
            ppo: PpoConfig {
                std_start: 0.15,
                std_end: 0.15,
                ..PpoConfig::default()
            },
            constraint: ConstraintConfig::default(),
        }
    }
}

impl IcrlConfig {
    /// Round counts per task: point tasks run 20 rounds, ball tasks 50;
    /// position tracking gets 50 constraint epochs per round, the rest 10.
    pub fn for_env(kind: EnvKind) -> Self {
        let (outer, inner) = match kind {
            EnvKind::PointVelocity => (20, 10),
            EnvKind::PointPosition => (20, 50),
            EnvKind::BallRun | EnvKind::BallCircle => (50, 10),
        };
        Self {
            outer_epochs: outer,
            inner_epochs: inner,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ppo.validate()?;
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.outer_epochs == 0 {
            return bad("outer_epochs must be positive");
        }
        if self.snapshot_episodes == 0 || self.history_cap == 0 {
            return bad("snapshot_episodes and history_cap must be positive");
        }
        let c = &self.constraint;
        if c.batch_size == 0 || c.steps_per_epoch == 0 {
            return bad("constraint batch_size and steps_per_epoch must be positive");
        }
        if !(c.lr >= 0.0) || !(c.l2_coeff >= 0.0) {
            return bad("constraint lr and l2_coeff must be non-negative");
        }
        if !(c.threshold > 0.0 && c.threshold < 1.0) {
            return bad("constraint threshold must lie in (0, 1)");
        }
        Ok(())
    }
}

/// A learner policy from one round and the steps it was observed taking.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnerSnapshot {
    pub round: usize,
    pub policy: Policy,
    /// Sampled episodes, each a list of steps.
    pub episodes: Vec<Vec<StepSample>>,
    /// Mean undiscounted environment return of those episodes.
    pub mean_return: f64,
}

impl LearnerSnapshot {
    fn steps(&self) -> impl Iterator<Item = &StepSample> {
        self.episodes.iter().flatten()
    }
}

/// Most recent learner snapshots plus a count of all rounds completed.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnerHistory {
    cap: usize,
    completed: usize,
    snapshots: VecDeque<LearnerSnapshot>,
}

impl LearnerHistory {
    pub fn new(cap: usize) -> Self {
        Self {
            cap: cap.max(1),
            completed: 0,
            snapshots: VecDeque::new(),
        }
    }

    pub fn push(&mut self, snapshot: LearnerSnapshot) {
        if self.snapshots.len() == self.cap {
            self.snapshots.pop_front();
        }
        self.snapshots.push_back(snapshot);
        self.completed += 1;
    }

    pub fn completed(&self) -> usize {
        self.completed
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &LearnerSnapshot> {
        self.snapshots.iter()
    }

    pub fn latest(&self) -> Option<&LearnerSnapshot> {
        self.snapshots.back()
    }
}

pub fn steps_of(trajectory: &Trajectory) -> Vec<StepSample> {
    trajectory
        .transitions
        .iter()
        .map(|t| StepSample {
            state: t.state.clone(),
            action: t.action.clone(),
            next_state: t.next_state.clone(),
        })
        .collect()
}

/// Mean over episodes of the summed learned cost.
pub fn episodic_psi_cost(psi: &ConstraintModel, episodes: &[Vec<StepSample>]) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for ep in episodes {
        for s in ep {
            total += psi.sample_cost(s)?;
        }
    }
    Ok(total / episodes.len() as f64)
}

fn mean_psi<'a>(psi: &ConstraintModel, rows: impl Iterator<Item = &'a StepSample>) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in rows {
        sum += psi.sample_cost(s)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(sum / n as f64)
}

/// Per-step separation `sum_j [mean psi on learner j - mean psi on expert]`.
pub fn separation(psi: &ConstraintModel, expert: &[StepSample], history: &LearnerHistory) -> Result<f64> {
    let e = mean_psi(psi, expert.iter())?;
    let mut total = 0.0;
    for snap in history.iter() {
        total += mean_psi(psi, snap.steps())? - e;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstraintUpdate {
    pub separation_before: f64,
    pub separation_after: f64,
}

/// Accumulate `weight * d mean(psi)/d params` over `rows` into `grad`.
fn accumulate_mean_grad(psi: &ConstraintModel, rows: &[&StepSample], weight: f64, grad: &mut [f64]) {
    let w = weight / rows.len() as f64;
    let mut trace = Trace::default();
    for s in rows {
        let x = psi.features(&s.state, &s.action, &s.next_state);
        psi.model.forward_trace(&x, &mut trace);
        psi.model.backward(&trace, &[w], Some(grad));
    }
}

/// Whole set when it fits in one batch, otherwise a uniform draw.
fn minibatch<'a>(rows: &[&'a StepSample], size: usize, r: &mut rng::Rng) -> Vec<&'a StepSample> {
    if rows.len() <= size {
        return rows.to_vec();
    }
    (0..size).map(|_| rows[r.random_range(0..rows.len())]).collect()
}

/// Gradient ascent on the learner-versus-expert separation minus an L2
/// penalty on the weights.
pub fn update_constraint(
    psi: &mut ConstraintModel,
    expert: &[StepSample],
    history: &LearnerHistory,
    config: &ConstraintConfig,
    inner_epochs: usize,
    seed: u64,
) -> Result<ConstraintUpdate> {
    if expert.is_empty() {
        return Err(Error::InsufficientData("no expert demonstrations".into()));
    }
    if history.is_empty() {
        return Err(Error::InsufficientData("no learner snapshot to contrast with".into()));
    }
    if config.lr < 0.0 {
        return Err(Error::InvalidConfig("constraint lr must be non-negative".into()));
    }
    let before = separation(psi, expert, history)?;
    let expert_rows: Vec<&StepSample> = expert.iter().collect();
    let learner_rows: Vec<Vec<&StepSample>> = history.iter().map(|s| s.steps().collect()).collect();
    if learner_rows.iter().any(|rows| rows.is_empty()) {
        return Err(Error::InsufficientData("empty learner snapshot".into()));
    }
    let k = learner_rows.len() as f64;
    let mut opt = Adam::for_net(AdamConfig::with_lr(config.lr), &psi.model.net);
    let mut r = rng::derived(seed, 0xc057);
    let n_params = psi.model.net.param_count();
    for _ in 0..inner_epochs {
        for _ in 0..config.steps_per_epoch {
            // Accumulate the ascent direction, then hand its negation to the
            // minimizing optimizer.
            let mut ascent = vec![0.0; n_params];
            let e_batch = minibatch(&expert_rows, config.batch_size, &mut r);
            accumulate_mean_grad(psi, &e_batch, -k, &mut ascent);
            for rows in &learner_rows {
                let l_batch = minibatch(rows, config.batch_size, &mut r);
                accumulate_mean_grad(psi, &l_batch, 1.0, &mut ascent);
            }
            let descent: Vec<f64> = ascent
                .iter()
                .zip(psi.model.net.weights())
                .map(|(g, w)| -g + 2.0 * psi.l2_coeff * w)
                .collect();
            opt.step(psi.model.net.weights_mut(), &descent)?;
        }
    }
    Ok(ConstraintUpdate {
        separation_before: before,
        separation_after: separation(psi, expert, history)?,
    })
}

/// One learner round: policy-gradient epochs with the learned cost as the
/// penalty signal and the expert's learned cost as the budget.
pub fn update_learner(
    trainer: &mut PpoLagrangian,
    env: &BlackBoxEnv,
    psi: &ConstraintModel,
    expert_psi_cost: f64,
    exploration_std: f64,
    seed: u64,
) -> Result<EpochStats> {
    trainer.lagrangian.cost_limit = expert_psi_cost;
    let cost = |s: &[f64], a: &[f64], n: &[f64]| psi.step_cost(s, a, n).unwrap_or(f64::NAN);
    trainer.epoch(env, &cost, exploration_std, seed)
}

/// Fit the pre-squash mean of `policy` to demonstrated actions.
pub fn behaviour_clone(policy: &mut Policy, demos: &[StepSample], epochs: usize, lr: f64, seed: u64) -> Result<()> {
    if demos.is_empty() || epochs == 0 {
        return Ok(());
    }
    // Invert the squash, keeping saturated actions finite.
    let targets: Vec<Vec<f64>> = demos
        .iter()
        .map(|d| {
            d.action
                .iter()
                .zip(&policy.action_bounds)
                .map(|(&a, &(lo, hi))| {
                    let half = 0.5 * (hi - lo);
                    let y = if half > 0.0 { (a - 0.5 * (lo + hi)) / half } else { 0.0 };
                    y.clamp(-0.995, 0.995).atanh()
                })
                .collect()
        })
        .collect();
    let mut opt = Adam::for_net(AdamConfig::with_lr(lr), &policy.model.net);
    let mut order: Vec<usize> = (0..demos.len()).collect();
    let mut r = rng::derived(seed, 0xbc);
    for _ in 0..epochs {
        for i in (1..order.len()).rev() {
            let j = r.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(256) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| demos[i].state.as_slice()).collect();
            let ts: Vec<&[f64]> = chunk.iter().map(|&i| targets[i].as_slice()).collect();
            policy.model.regression_step(&xs, &ts, &mut opt)?;
        }
    }
    Ok(())
}

/// Roll out `policy` with exploration noise through the black-box interface.
pub fn sample_episodes(
    env: &BlackBoxEnv,
    policy: &Policy,
    episodes: usize,
    seed: u64,
) -> Result<(Vec<Vec<StepSample>>, f64)> {
    let mut out = Vec::with_capacity(episodes);
    let mut total = 0.0;
    for ep in 0..episodes {
        let ep_seed = seed.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(ep as u64);
        let mut noise = rng::derived(ep_seed, 0x5a);
        let mut state = env.reset(ep_seed);
        let mut steps = Vec::with_capacity(env.horizon());
        for _ in 0..env.horizon() {
            let mut action = policy.act(&state, false, &mut noise)?;
            let (next, reward) = env.step(&state, &mut action)?;
            total += reward;
            steps.push(StepSample {
                state,
                action,
                next_state: next.clone(),
            });
            state = next;
        }
        out.push(steps);
    }
    Ok((out, total / episodes.max(1) as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcrlLogRow {
    pub epoch: usize,
    pub learner_return: f64,
    pub learner_psi_cost: f64,
    pub expert_psi_cost: f64,
    /// `learner_psi_cost - expert_psi_cost`.
    pub margin: f64,
}

#[derive(Clone, Debug)]
pub struct IcrlOutcome {
    pub constraint: ConstraintModel,
    pub learner: Policy,
    pub history: LearnerHistory,
    pub log: Vec<IcrlLogRow>,
    /// Final amount by which the learner's learned cost exceeds the
    /// expert's (zero when it does not).
    pub slack: f64,
}

/// Constraint network before any update: features standardized on the
/// demonstrations, output centred at one half.
pub fn initial_constraint(
    expert: &[StepSample],
    state_dim: usize,
    action_dim: usize,
    config: &IcrlConfig,
) -> Result<ConstraintModel> {
    let psi_cfg = &config.constraint;
    let width = state_dim + action_dim;
    let probe = ConstraintModel::from_model(
        ScaledNet::with_input_scaling(
            Standardizer::identity(width),
            DenseNet::zeros(&[width, 1], Activation::Identity, Activation::Sigmoid)?,
        )?,
        state_dim,
        psi_cfg.threshold,
        psi_cfg.l2_coeff,
        psi_cfg.input,
    )?;
    let rows: Vec<Vec<f64>> = expert
        .iter()
        .map(|s| probe.features(&s.state, &s.action, &s.next_state))
        .collect();
    let scaler = Standardizer::fit(rows.iter().map(|x| x.as_slice()), width)?;
    let mut r = rng::derived(config.seed, 0x1c42);
    ConstraintModel::new(
        scaler,
        state_dim,
        &psi_cfg.hidden,
        psi_cfg.threshold,
        psi_cfg.l2_coeff,
        psi_cfg.input,
        &mut r,
    )
}

pub fn train_icrl(env: &BlackBoxEnv, demos: &[Trajectory], config: &IcrlConfig) -> Result<IcrlOutcome> {
    config.validate()?;
    let expert_eps: Vec<Vec<StepSample>> = demos.iter().map(steps_of).filter(|e| !e.is_empty()).collect();
    if expert_eps.is_empty() {
        return Err(Error::InsufficientData("demonstration set is empty".into()));
    }
    let expert: Vec<StepSample> = expert_eps.iter().flatten().cloned().collect();
    let state_dim = env.state_dim();
    let action_dim = env.action_dim();
    for s in &expert {
        check_dim("demo state", state_dim, s.state.len())?;
        check_dim("demo action", action_dim, s.action.len())?;
    }

    let mut r = rng::derived(config.seed, 0x1c41);
    let state_scaler = Standardizer::fit(expert.iter().map(|s| s.state.as_slice()), state_dim)?;
    let mut learner = Policy::new(
        state_scaler.clone(),
        &config.ppo.hidden,
        env.action_bounds().to_vec(),
        config.ppo.std_start,
        &mut r,
    )?;
    behaviour_clone(&mut learner, &expert, config.warm_start_epochs, 1e-3, config.seed)?;

    let psi_cfg = &config.constraint;
    let mut psi = initial_constraint(&expert, state_dim, action_dim, config)?;
    let mut r = rng::derived(config.seed, 0x1c43);
    let mut expert_cost = episodic_psi_cost(&psi, &expert_eps)?;
    let mut trainer = PpoLagrangian::new(config.ppo.clone(), learner, expert_cost, &mut r)?;
    let mut history = LearnerHistory::new(config.history_cap);
    let mut log = Vec::with_capacity(config.outer_epochs);
    let total_learner_epochs = config.outer_epochs * config.learner_epochs;
    for round in 0..config.outer_epochs {
        for k in 0..config.learner_epochs {
            let e = round * config.learner_epochs + k;
            let std = config.ppo.std_at(e, total_learner_epochs);
            let seed = config.seed.wrapping_mul(104_729).wrapping_add(e as u64);
            update_learner(&mut trainer, env, &psi, expert_cost, std, seed)?;
        }
        let snap_seed = config.seed.wrapping_mul(15_485_863).wrapping_add(round as u64) ^ 0x5a5a;
        let (episodes, mean_return) = sample_episodes(env, &trainer.policy, config.snapshot_episodes, snap_seed)?;
        history.push(LearnerSnapshot {
            round,
            policy: trainer.policy.clone(),
            episodes,
            mean_return,
        });
        update_constraint(
            &mut psi,
            &expert,
            &history,
            psi_cfg,
            config.inner_epochs,
            config.seed.wrapping_add(round as u64),
        )?;
        expert_cost = episodic_psi_cost(&psi, &expert_eps)?;
        let latest = history.latest().expect("snapshot just pushed");
        let learner_cost = episodic_psi_cost(&psi, &latest.episodes)?;
        log.push(IcrlLogRow {
            epoch: round,
            learner_return: latest.mean_return,
            learner_psi_cost: learner_cost,
            expert_psi_cost: expert_cost,
            margin: learner_cost - expert_cost,
        });
    }
    let slack = log.last().map_or(0.0, |row| row.margin.max(0.0));
    let mut learner = trainer.policy;
    learner.exploration_std = config.ppo.std_end;
    Ok(IcrlOutcome {
        constraint: psi,
        learner,
        history,
        log,
        slack,
    })
}

pub fn log_csv(log: &[IcrlLogRow]) -> String {
    let mut out = String::from("epoch,learner_return,learner_psi_cost,expert_psi_cost,margin\n");
    for row in log {
        writeln!(
            out,
            "{},{:?},{:?},{:?},{:?}",
            row.epoch, row.learner_return, row.learner_psi_cost, row.expert_psi_cost, row.margin
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{EnvKind, EnvSpec};

    fn psi(seed: u64, l2: f64) -> ConstraintModel {
        let mut r = rng::seeded(seed);
        ConstraintModel::new(
            Standardizer::identity(4),
            2,
            &[16],
            0.5,
            l2,
            PsiInput::StateAction,
            &mut r,
        )
        .unwrap()
    }

    fn sample(x: f64, y: f64) -> StepSample {
        StepSample {
            state: vec![x, y],
            action: vec![0.0, 0.0],
            next_state: vec![x, y],
        }
    }

    fn snapshot(rows: Vec<StepSample>, policy: Policy) -> LearnerSnapshot {
        LearnerSnapshot {
            round: 0,
            policy,
            episodes: vec![rows],
            mean_return: 0.0,
        }
    }

    fn dummy_policy() -> Policy {
        let mut r = rng::seeded(0);
        Policy::new(Standardizer::identity(2), &[4], vec![(-1.0, 1.0); 2], 0.1, &mut r).unwrap()
    }

    #[test]
    fn outputs_stay_in_unit_interval() {
        let mut p = psi(1, 0.0);
        for w in p.model.net.weights_mut() {
            *w *= 50.0;
        }
        for i in 0..100 {
            let v = p.value(&[i as f64 - 50.0, 3.0], &[1.0, -1.0]).unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn state_gradient_matches_finite_differences() {
        let p = psi(2, 0.0);
        let (s, a) = ([0.3, -0.7], [0.2, 0.5]);
        let (_, g_s, g_a) = p.value_and_gradient(&s, &a).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut sp = s;
            let mut sm = s;
            sp[i] += h;
            sm[i] -= h;
            let fd = (p.value(&sp, &a).unwrap() - p.value(&sm, &a).unwrap()) / (2.0 * h);
            assert!((fd - g_s[i]).abs() <= 1e-4 * fd.abs().max(1e-4));
        }
        assert_eq!(g_a.len(), 2);
    }

    #[test]
    fn next_state_mode_pairs_with_zero_action() {
        let mut p = psi(3, 0.0);
        p.input = PsiInput::NextState;
        let x = p.features(&[1.0, 2.0], &[0.5, 0.5], &[3.0, 4.0]);
        assert_eq!(x, vec![3.0, 4.0, 0.0, 0.0]);
        assert_eq!(
            p.step_cost(&[1.0, 2.0], &[0.5, 0.5], &[3.0, 4.0]).unwrap(),
            p.value(&[3.0, 4.0], &[0.0, 0.0]).unwrap()
        );
    }

    #[test]
    fn identical_data_only_shrinks_weights() {
        let mut p = psi(4, 0.1);
        let rows: Vec<StepSample> = (0..20).map(|i| sample(i as f64 * 0.1, -0.3)).collect();
        let mut history = LearnerHistory::new(5);
        history.push(snapshot(rows.clone(), dummy_policy()));
        let norm = |p: &ConstraintModel| p.model.net.weights().iter().map(|w| w * w).sum::<f64>();
        let before = norm(&p);
        let cfg = ConstraintConfig {
            batch_size: 64,
            steps_per_epoch: 1,
            lr: 1e-3,
            ..ConstraintConfig::default()
        };
        update_constraint(&mut p, &rows, &history, &cfg, 1, 0).unwrap();
        assert!(norm(&p) < before);
    }

    #[test]
    fn separable_data_gains_margin() {
        let mut p = psi(5, 0.0);
        let mut r = rng::seeded(9);
        let mut expert = Vec::new();
        let mut learner = Vec::new();
        while expert.len() < 200 {
            let (x, y): (f64, f64) = (r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
            if x * x + y * y < 1.0 {
                expert.push(sample(x, y));
            }
        }
        while learner.len() < 200 {
            let (x, y): (f64, f64) = (r.random_range(-3.0..3.0), r.random_range(-3.0..3.0));
            if x * x + y * y > 1.5 {
                learner.push(sample(x, y));
            }
        }
        let mut history = LearnerHistory::new(5);
        history.push(snapshot(learner, dummy_policy()));
        let cfg = ConstraintConfig {
            l2_coeff: 0.0,
            steps_per_epoch: 1,
            batch_size: 1000,
            lr: 1e-2,
            ..ConstraintConfig::default()
        };
        let out = update_constraint(&mut p, &expert, &history, &cfg, 1, 0).unwrap();
        assert!(out.separation_after > out.separation_before);
    }

    #[test]
    fn constraint_update_needs_data() {
        let mut p = psi(6, 0.0);
        let history = LearnerHistory::new(5);
        let cfg = ConstraintConfig::default();
        assert!(matches!(
            update_constraint(&mut p, &[], &history, &cfg, 1, 0),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(
            update_constraint(&mut p, &[sample(0.0, 0.0)], &history, &cfg, 1, 0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn history_is_capped_but_counts_rounds() {
        let mut h = LearnerHistory::new(5);
        for i in 0..8 {
            let mut s = snapshot(vec![sample(0.0, 0.0)], dummy_policy());
            s.round = i;
            h.push(s);
        }
        assert_eq!(h.len(), 5);
        assert_eq!(h.completed(), 8);
        assert_eq!(h.iter().next().unwrap().round, 3);
    }

    #[test]
    fn default_round_counts() {
        let v = IcrlConfig::for_env(EnvKind::PointVelocity);
        assert_eq!((v.outer_epochs, v.inner_epochs), (20, 10));
        let p = IcrlConfig::for_env(EnvKind::PointPosition);
        assert_eq!((p.outer_epochs, p.inner_epochs), (20, 50));
        assert!(v.validate().is_ok() && p.validate().is_ok());
    }

    #[test]
    fn zero_inner_epochs_leave_constraint_untouched() {
        let spec = EnvSpec::new(EnvKind::PointVelocity);
        let env = BlackBoxEnv::new(spec.clone());
        let policy = crate::expert::initial_policy(&spec, &Default::default()).unwrap();
        let demos = crate::expert::collect_demos(&spec, &policy, 2, 0).unwrap();
        let config = IcrlConfig {
            outer_epochs: 1,
            inner_epochs: 0,
            learner_epochs: 1,
            snapshot_episodes: 1,
            warm_start_epochs: 1,
            ppo: PpoConfig {
                episodes_per_epoch: 1,
                update_passes: 1,
                hidden: vec![8],
                ..IcrlConfig::default().ppo
            },
            constraint: ConstraintConfig {
                hidden: vec![8],
                ..ConstraintConfig::default()
            },
            ..IcrlConfig::default()
        };
        let a = train_icrl(&env, &demos, &config).unwrap();
        let expert: Vec<StepSample> = demos.iter().flat_map(steps_of).collect();
        let init = initial_constraint(&expert, 4, 2, &config).unwrap();
        assert_eq!(a.constraint, init);
        let row = &a.log[0];
        assert!(row.margin.is_finite());
        assert_eq!(a.history.completed(), 1);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = psi(7, 0.25);
        p.input = PsiInput::NextState;
        let path = dir.path().join("psi.weights");
        p.save(&path).unwrap();
        assert_eq!(ConstraintModel::load(&path).unwrap(), p);
    }
}
