//! Deterministic point-mass control tasks with binary safety costs.
//!
//! All four tasks share the state layout `[x, y, vx, vy]`, a two-dimensional
//! acceleration command, and damped semi-implicit Euler integration:
//!
//! ```text
//! v' = v + dt * (gain * a - damping * v)
//! p' = p + dt * v'
//! ```
//!
//! Rewards and costs are functions of the transition and are evaluated on the
//! post-step state. A cost of 1 marks a step whose next state breaks the task
//! constraint; equality with a threshold is safe.

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::rng;

pub const STATE_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvKind {
    PointVelocity,
    PointPosition,
    BallRun,
    BallCircle,
}

impl EnvKind {
    pub const ALL: [EnvKind; 4] = [
        EnvKind::PointVelocity,
        EnvKind::PointPosition,
        EnvKind::BallRun,
        EnvKind::BallCircle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::PointVelocity => "PointVelocity",
            EnvKind::PointPosition => "PointPosition",
            EnvKind::BallRun => "BallRun",
            EnvKind::BallCircle => "BallCircle",
        }
    }

    pub fn is_ball(self) -> bool {
        matches!(self, EnvKind::BallRun | EnvKind::BallCircle)
    }

    /// Default perturbation budgets swept for this task family.
    pub fn default_epsilons(self) -> Vec<f64> {
        if self.is_ball() {
            vec![0.05, 0.1, 0.15, 0.2]
        } else {
            vec![0.01, 0.02, 0.05, 0.1]
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        // Accept `PointVelocity`, `point_velocity` and `point-velocity`.
        let key: String = s.chars().filter(|c| *c != '_' && *c != '-').collect();
        EnvKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(&key))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown environment `{s}`")))
    }
}

pub const VELOCITY_LIMIT: f64 = 0.75;
pub const BALL_RUN_Y_LIMIT: f64 = 2.0;
pub const BALL_RUN_SPEED_LIMIT: f64 = 2.5;
pub const CIRCLE_RADIUS: f64 = 5.0;
pub const CIRCLE_X_LIMIT: f64 = 2.5;

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub state_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    pub cost_limit: f64,
    pub dt: f64,
    pub action_bounds: Vec<(f64, f64)>,
    /// Acceleration produced by a unit action.
    pub gain: f64,
    /// Linear velocity damping rate (1/s).
    pub damping: f64,
    /// Half-width of the box the initial position is drawn from.
    pub init_offset: f64,
}

impl EnvSpec {
    pub fn new(kind: EnvKind) -> Self {
        let (horizon, cost_limit, gain, damping) = match kind {
            EnvKind::PointVelocity => (200, 20.0, 1.0, 0.5),
            EnvKind::PointPosition => (200, 100.0, 1.0, 0.5),
            EnvKind::BallRun => (100, 25.0, 4.0, 1.0),
            EnvKind::BallCircle => (100, 10.0, 4.0, 1.0),
        };
        Self {
            kind,
            state_dim: STATE_DIM,
            action_dim: ACTION_DIM,
            horizon,
            cost_limit,
            dt: 0.1,
            action_bounds: vec![(-1.0, 1.0); ACTION_DIM],
            gain,
            damping,
            init_offset: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::InvalidConfig("horizon must be at least 1".into()));
        }
        if !(self.cost_limit >= 0.0 && self.cost_limit.is_finite()) {
            return Err(Error::InvalidConfig("cost limit must be non-negative".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidConfig("dt must be positive".into()));
        }
        check_dim("state dim", STATE_DIM, self.state_dim)?;
        check_dim("action bounds", self.action_dim, self.action_bounds.len())?;
        for &(lo, hi) in &self.action_bounds {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidConfig("action bounds must be finite intervals".into()));
            }
        }
        Ok(())
    }

    /// Nominal magnitude of each state coordinate over an episode, used to
    /// condition policy inputs.
    pub fn observation_scale(&self) -> Vec<f64> {
        match self.kind {
            EnvKind::PointVelocity | EnvKind::PointPosition => vec![10.0, 5.0, 1.0, 1.0],
            EnvKind::BallRun => vec![10.0, 2.0, 2.0, 2.0],
            EnvKind::BallCircle => vec![3.0, 3.0, 2.0, 2.0],
        }
    }

    pub fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(&self.action_bounds)
            .map(|(&a, &(lo, hi))| a.clamp(lo, hi))
            .collect()
    }

    /// Pure transition function without reward or cost.
    pub fn dynamics(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        let a = self.clip_action(action);
        let vx = state[2] + self.dt * (self.gain * a[0] - self.damping * state[2]);
        let vy = state[3] + self.dt * (self.gain * a[1] - self.damping * state[3]);
        vec![state[0] + self.dt * vx, state[1] + self.dt * vy, vx, vy]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub cost: f64,
    pub next_state: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }

    pub fn total_cost(&self) -> f64 {
        self.transitions.iter().map(|t| t.cost).sum()
    }

    /// Checks the chaining and length invariants against `spec`.
    pub fn validate(&self, spec: &EnvSpec) -> Result<()> {
        if self.transitions.len() > spec.horizon {
            return Err(Error::InvalidConfig(format!(
                "trajectory of {} steps exceeds horizon {}",
                self.transitions.len(),
                spec.horizon
            )));
        }
        for w in self.transitions.windows(2) {
            if w[0].next_state != w[1].state {
                return Err(Error::InvalidConfig("trajectory steps do not chain".into()));
            }
        }
        Ok(())
    }

    /// CSV with header `t,s0..,a0..,r,c,s'0..`, one row per step.
    pub fn to_csv(&self, spec: &EnvSpec) -> String {
        let mut out = csv_header(spec);
        out.push('\n');
        for (t, tr) in self.transitions.iter().enumerate() {
            write!(out, "{t}").unwrap();
            for v in tr.state.iter().chain(&tr.action) {
                write!(out, ",{v:?}").unwrap();
            }
            write!(out, ",{:?},{:?}", tr.reward, tr.cost).unwrap();
            for v in &tr.next_state {
                write!(out, ",{v:?}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(spec: &EnvSpec, text: &str, seed: u64) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::parse("trajectory csv", "missing header"))?;
        if header != csv_header(spec) {
            return Err(Error::parse("trajectory csv", format!("unexpected header `{header}`")));
        }
        let (sd, ad) = (spec.state_dim, spec.action_dim);
        let width = 1 + sd + ad + 2 + sd;
        let mut transitions = Vec::new();
        for (row, line) in lines.enumerate() {
            let fields = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::parse("trajectory csv", format!("row {row}: {e}")))?;
            if fields.len() != width {
                return Err(Error::parse(
                    "trajectory csv",
                    format!("row {row}: expected {width} fields, got {}", fields.len()),
                ));
            }
            transitions.push(Transition {
                state: fields[1..1 + sd].to_vec(),
                action: fields[1 + sd..1 + sd + ad].to_vec(),
                reward: fields[1 + sd + ad],
                cost: fields[2 + sd + ad],
                next_state: fields[3 + sd + ad..].to_vec(),
            });
        }
        Ok(Self { transitions, seed })
    }
}

fn csv_header(spec: &EnvSpec) -> String {
    let mut cols = vec!["t".to_string()];
    cols.extend((0..spec.state_dim).map(|i| format!("s{i}")));
    cols.extend((0..spec.action_dim).map(|i| format!("a{i}")));
    cols.push("r".into());
    cols.push("c".into());
    cols.extend((0..spec.state_dim).map(|i| format!("s'{i}")));
    cols.join(",")
}

/// Initial state: position uniform in the `init_offset` box, zero velocity.
pub fn reset(spec: &EnvSpec, seed: u64) -> Vec<f64> {
    let mut rng = rng::derived(seed, 0x5eed);
    let r = spec.init_offset;
    let x = if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    let y = if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    vec![x, y, 0.0, 0.0]
}

pub fn step(spec: &EnvSpec, state: &[f64], action: &[f64]) -> Result<Transition> {
    check_dim("env state", spec.state_dim, state.len())?;
    check_dim("env action", spec.action_dim, action.len())?;
    check_finite("env state", state)?;
    check_finite("env action", action)?;
    let action = spec.clip_action(action);
    let next_state = spec.dynamics(state, &action);
    let reward = reward(spec, state, &next_state);
    let cost = ground_truth_cost(spec, state, &action, &next_state);
    Ok(Transition {
        state: state.to_vec(),
        action,
        reward,
        cost,
        next_state,
    })
}

fn reward(spec: &EnvSpec, _state: &[f64], next: &[f64]) -> f64 {
    match spec.kind {
        EnvKind::PointVelocity | EnvKind::PointPosition | EnvKind::BallRun => next[2] * spec.dt,
        EnvKind::BallCircle => {
            let (x, y, vx, vy) = (next[0], next[1], next[2], next[3]);
            let r = x.hypot(y);
            (x * vy - y * vx) / (1.0 + (r - CIRCLE_RADIUS).abs())
        }
    }
}

/// The task's constraint checker, evaluated on the post-step state.
pub fn ground_truth_cost(spec: &EnvSpec, _state: &[f64], _action: &[f64], next: &[f64]) -> f64 {
    let violated = match spec.kind {
        EnvKind::PointVelocity => next[2].hypot(next[3]) > VELOCITY_LIMIT,
        EnvKind::PointPosition => 0.5 * next[0] - next[1] > 0.0,
        EnvKind::BallRun => next[1].abs() > BALL_RUN_Y_LIMIT || next[2].hypot(next[3]) > BALL_RUN_SPEED_LIMIT,
        EnvKind::BallCircle => next[0].abs() > CIRCLE_X_LIMIT,
    };
    if violated {
        1.0
    } else {
        0.0
    }
}

/// Roll out `policy` from `reset(spec, seed)` for the full horizon.
pub fn rollout<F>(spec: &EnvSpec, seed: u64, mut policy: F) -> Result<Trajectory>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut state = reset(spec, seed);
    let mut transitions = Vec::with_capacity(spec.horizon);
    for _ in 0..spec.horizon {
        let action = policy(&state)?;
        let tr = step(spec, &state, &action)?;
        state = tr.next_state.clone();
        transitions.push(tr);
    }
    Ok(Trajectory { transitions, seed })
}

/// Environment access without the cost channel: what an attacker interacting
/// with the deployed system can observe.
#[derive(Clone, Debug)]
pub struct BlackBoxEnv {
    spec: EnvSpec,
}

impl BlackBoxEnv {
    pub fn new(spec: EnvSpec) -> Self {
        Self { spec }
    }

    pub fn state_dim(&self) -> usize {
        self.spec.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.spec.action_dim
    }

    pub fn horizon(&self) -> usize {
        self.spec.horizon
    }

    pub fn action_bounds(&self) -> &[(f64, f64)] {
        &self.spec.action_bounds
    }

    pub fn kind(&self) -> EnvKind {
        self.spec.kind
    }

    pub fn reset(&self, seed: u64) -> Vec<f64> {
        reset(&self.spec, seed)
    }

    /// Returns `(next_state, reward)`; the executed (clipped) action is
    /// written back into `action`.
    pub fn step(&self, state: &[f64], action: &mut [f64]) -> Result<(Vec<f64>, f64)> {
        let tr = step(&self.spec, state, action)?;
        action.copy_from_slice(&tr.action);
        Ok((tr.next_state, tr.reward))
    }
}

/// On-disk demonstration set: `manifest.toml` plus one trajectory CSV per
/// episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoManifest {
    pub env: EnvKind,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub files: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.toml";

pub fn write_demo_dataset(dir: &Path, spec: &EnvSpec, trajectories: &[Trajectory]) -> Result<DemoManifest> {
    write_demo_dataset_with_preamble(dir, spec, trajectories, "")
}

/// Like [`write_demo_dataset`], prefixing every trajectory file with
/// `preamble` (typically `#` comment lines, which the reader skips).
pub fn write_demo_dataset_with_preamble(
    dir: &Path,
    spec: &EnvSpec,
    trajectories: &[Trajectory],
    preamble: &str,
) -> Result<DemoManifest> {
    std::fs::create_dir_all(dir)?;
    let files: Vec<String> = (0..trajectories.len()).map(|i| format!("traj_{i:04}.csv")).collect();
    for (file, traj) in files.iter().zip(trajectories) {
        std::fs::write(dir.join(file), format!("{preamble}{}", traj.to_csv(spec)))?;
    }
    let manifest = DemoManifest {
        env: spec.kind,
        episodes: trajectories.len(),
        seeds: trajectories.iter().map(|t| t.seed).collect(),
        files,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::parse("demo manifest", e.to_string()))?;
    std::fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(manifest)
}

pub fn read_demo_dataset(dir: &Path) -> Result<(DemoManifest, Vec<Trajectory>)> {
    let manifest_path: PathBuf = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(Error::MissingArtifact(manifest_path));
    }
    let manifest: DemoManifest = toml::from_str(&std::fs::read_to_string(&manifest_path)?)
        .map_err(|e| Error::parse("demo manifest", e.to_string()))?;
    if manifest.files.len() != manifest.episodes || manifest.seeds.len() != manifest.episodes {
        return Err(Error::parse(
            "demo manifest",
            "episode count disagrees with file or seed lists",
        ));
    }
    let spec = EnvSpec::new(manifest.env);
    let trajectories = manifest
        .files
        .iter()
        .zip(&manifest.seeds)
        .map(|(f, &seed)| {
            let path = dir.join(f);
            if !path.exists() {
                return Err(Error::MissingArtifact(path));
            }
            Trajectory::from_csv(&spec, &std::fs::read_to_string(path)?, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, trajectories))
}
