//! Attacked evaluation: each step the attacker perturbs the observation, the
//! victim acts on what it is shown, and the environment advances from the
//! true state. Costs always come from the environment's own checker.

use std::cell::Cell;
use std::fmt::Write as _;

use crate::attacks::{
    baseline_attack, icrl_attack, random_attack, AttackConfig, AttackKind, Perturbation, PrivilegedVictim,
    SurrogateModels,
};
use crate::envs::{self, EnvKind, EnvSpec, Trajectory};
use crate::error::{check_dim, Error, Result};
use crate::policy::{ActionOracle, Policy};
use crate::rng;

/// The deployed victim as an attacker meets it: observations in, actions
/// out. The policy inside cannot be reached from outside this module.
///
/// ```compile_fail
/// # fn peek(v: &safe_rl_attack::pipeline::VictimHandle) {
/// let _weights = v.policy.model.net.weights();
/// # }
/// ```
#[derive(Debug)]
pub struct VictimHandle {
    policy: Policy,
    queries: Cell<usize>,
}

impl VictimHandle {
    pub fn new(policy: Policy) -> Self {
        Self {
            policy,
            queries: Cell::new(0),
        }
    }

    /// Observations answered so far.
    pub fn queries(&self) -> usize {
        self.queries.get()
    }

    pub fn state_dim(&self) -> usize {
        self.policy.state_dim()
    }
}

impl ActionOracle for VictimHandle {
    fn query(&self, observation: &[f64]) -> Result<Vec<f64>> {
        self.queries.set(self.queries.get() + 1);
        self.policy.act_deterministic(observation)
    }
}

/// Who perturbs the observations, and with what.
#[derive(Clone, Copy, Debug)]
pub enum Attacker<'a> {
    None,
    Random {
        epsilon: f64,
    },
    Icrl {
        models: &'a SurrogateModels,
        config: AttackConfig,
    },
    Baseline {
        victim: &'a PrivilegedVictim,
        config: AttackConfig,
    },
}

impl Attacker<'_> {
    pub fn kind(&self) -> AttackKind {
        match self {
            Attacker::None => AttackKind::None,
            Attacker::Random { .. } => AttackKind::Random,
            Attacker::Icrl { .. } => AttackKind::Icrl,
            Attacker::Baseline { config, .. } => config.kind,
        }
    }

    pub fn epsilon(&self) -> f64 {
        match self {
            Attacker::None => 0.0,
            Attacker::Random { epsilon } => *epsilon,
            Attacker::Icrl { config, .. } | Attacker::Baseline { config, .. } => config.epsilon,
        }
    }

    fn perturb(&self, state: &[f64], rng: &mut rng::Rng) -> Result<Perturbation> {
        match self {
            Attacker::None => Ok(Perturbation::zero(state.len(), AttackKind::None.access())),
            Attacker::Random { epsilon } => Ok(random_attack(state, *epsilon, rng)),
            Attacker::Icrl { models, config } => icrl_attack(state, models, config),
            Attacker::Baseline { victim, config } => baseline_attack(config.kind, state, victim, config),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeMetrics {
    pub total_return: f64,
    pub total_cost: f64,
    /// `total_cost` strictly above the cost limit.
    pub violated: bool,
    pub steps: usize,
    pub seed: u64,
}

impl EpisodeMetrics {
    pub fn from_trajectory(spec: &EnvSpec, trajectory: &Trajectory) -> Self {
        let total_cost = trajectory.total_cost();
        Self {
            total_return: trajectory.total_reward(),
            total_cost,
            violated: total_cost > spec.cost_limit,
            steps: trajectory.len(),
            seed: trajectory.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub metrics: EpisodeMetrics,
    /// True states, executed actions and ground-truth costs.
    pub trajectory: Trajectory,
    /// Offset applied to each observation.
    pub deltas: Vec<Vec<f64>>,
}

impl EpisodeRecord {
    /// What the victim was shown at each step and what it did.
    pub fn observed_steps(&self) -> Vec<crate::bounds::ObservedStep> {
        self.trajectory
            .transitions
            .iter()
            .zip(&self.deltas)
            .map(|(t, d)| crate::bounds::ObservedStep {
                observation: t.state.iter().zip(d).map(|(s, d)| s + d).collect(),
                action: t.action.clone(),
            })
            .collect()
    }
}

pub fn run_episode(spec: &EnvSpec, victim: &VictimHandle, attacker: &Attacker, seed: u64) -> Result<EpisodeRecord> {
    check_dim("victim state", spec.state_dim, victim.state_dim())?;
    let epsilon = attacker.epsilon();
    let mut noise = rng::derived(seed, 0xa77ac);
    let mut state = envs::reset(spec, seed);
    let mut transitions = Vec::with_capacity(spec.horizon);
    let mut deltas = Vec::with_capacity(spec.horizon);
    for _ in 0..spec.horizon {
        let p = attacker.perturb(&state, &mut noise)?;
        let norm = p.norm();
        if !(norm <= epsilon) {
            return Err(Error::BudgetExceeded { norm, epsilon });
        }
        let observation: Vec<f64> = state.iter().zip(&p.delta).map(|(s, d)| s + d).collect();
        let action = victim.query(&observation)?;
        let tr = envs::step(spec, &state, &action)?;
        state = tr.next_state.clone();
        transitions.push(tr);
        deltas.push(p.delta);
    }
    let trajectory = Trajectory { transitions, seed };
    Ok(EpisodeRecord {
        metrics: EpisodeMetrics::from_trajectory(spec, &trajectory),
        trajectory,
        deltas,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateReport {
    pub env: EnvKind,
    pub attack: AttackKind,
    pub epsilon: f64,
    pub episodes: usize,
    pub mean_cost: f64,
    /// Population standard deviation.
    pub std_cost: f64,
    pub mean_return: f64,
    pub std_return: f64,
    pub violation_rate: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl AggregateReport {
    pub fn from_metrics(spec: &EnvSpec, attack: AttackKind, epsilon: f64, metrics: &[EpisodeMetrics]) -> Result<Self> {
        if metrics.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let costs: Vec<f64> = metrics.iter().map(|m| m.total_cost).collect();
        let returns: Vec<f64> = metrics.iter().map(|m| m.total_return).collect();
        let (mean_cost, std_cost) = mean_std(&costs);
        let (mean_return, std_return) = mean_std(&returns);
        let violated = metrics.iter().filter(|m| m.violated).count();
        Ok(Self {
            env: spec.kind,
            attack,
            epsilon,
            episodes: metrics.len(),
            mean_cost,
            std_cost,
            mean_return,
            std_return,
            violation_rate: violated as f64 / metrics.len() as f64,
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:?},{},{:?},{:?},{:?},{:?},{:?}",
            self.env,
            self.attack,
            self.epsilon,
            self.episodes,
            self.mean_cost,
            self.std_cost,
            self.mean_return,
            self.std_return,
            self.violation_rate
        )
    }
}

pub const REPORT_CSV_HEADER: &str =
    "env,attack,epsilon,episodes,mean_cost,std_cost,mean_return,std_return,violation_rate";

pub fn report_csv(reports: &[AggregateReport]) -> String {
    let mut out = format!("{REPORT_CSV_HEADER}\n");
    for r in reports {
        writeln!(out, "{}", r.csv_row()).unwrap();
    }
    out
}

/// Parse a report CSV written by [`report_csv`]. Lines starting with `#`
/// are comments.
pub fn parse_report_csv(text: &str) -> Result<Vec<AggregateReport>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    match lines.next() {
        Some(h) if h == REPORT_CSV_HEADER => {}
        Some(h) => return Err(Error::parse("report csv", format!("unexpected header `{h}`"))),
        None => return Err(Error::parse("report csv", "missing header")),
    }
    lines
        .enumerate()
        .map(|(row, line)| {
            let bad = |what: &str| Error::parse("report csv", format!("row {row}: bad {what}"));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(bad("field count"));
            }
            let num = |i: usize, what: &str| f[i].parse::<f64>().map_err(|_| bad(what));
            Ok(AggregateReport {
                env: f[0].parse().map_err(|_| bad("env"))?,
                attack: f[1].parse().map_err(|_| bad("attack"))?,
                epsilon: num(2, "epsilon")?,
                episodes: f[3].parse().map_err(|_| bad("episodes"))?,
                mean_cost: num(4, "mean_cost")?,
                std_cost: num(5, "std_cost")?,
                mean_return: num(6, "mean_return")?,
                std_return: num(7, "std_return")?,
                violation_rate: num(8, "violation_rate")?,
            })
        })
        .collect()
}

/// Run `episodes` episodes with seeds `seed_base, seed_base + 1, ...`.
pub fn evaluate(
    spec: &EnvSpec,
    victim: &VictimHandle,
    attacker: &Attacker,
    episodes: usize,
    seed_base: u64,
) -> Result<(AggregateReport, Vec<EpisodeRecord>)> {
    if episodes == 0 {
        return Err(Error::InvalidConfig("episodes must be at least 1".into()));
    }
    let records: Vec<EpisodeRecord> = (0..episodes as u64)
        .map(|i| run_episode(spec, victim, attacker, seed_base + i))
        .collect::<Result<_>>()?;
    let metrics: Vec<EpisodeMetrics> = records.iter().map(|r| r.metrics).collect();
    let report = AggregateReport::from_metrics(spec, attacker.kind(), attacker.epsilon(), &metrics)?;
    Ok((report, records))
}

/// Evaluate the unattacked victim once, then every `(kind, epsilon)` pair.
/// `make` builds the attacker for a pair; kinds it cannot serve should
/// return an error.
pub fn attack_sweep<'a, F>(
    spec: &EnvSpec,
    victim: &VictimHandle,
    kinds: &[AttackKind],
    epsilons: &[f64],
    episodes: usize,
    seed_base: u64,
    make: F,
) -> Result<Vec<AggregateReport>>
where
    F: Fn(AttackKind, f64) -> Result<Attacker<'a>>,
{
    if epsilons.is_empty() {
        return Err(Error::InvalidConfig("epsilon list is empty".into()));
    }
    let mut reports = vec![evaluate(spec, victim, &Attacker::None, episodes, seed_base)?.0];
    for &kind in kinds.iter().filter(|k| **k != AttackKind::None) {
        for &eps in epsilons {
            let attacker = make(kind, eps)?;
            reports.push(evaluate(spec, victim, &attacker, episodes, seed_base)?.0);
        }
    }
    Ok(reports)
}

/// `(kind, epsilon)` rows whose mean cost fell below the row for the same
/// kind at the next smaller budget.
pub fn monotonicity_flags(reports: &[AggregateReport]) -> Vec<(AttackKind, f64)> {
    let mut flags = Vec::new();
    let mut kinds: Vec<AttackKind> = Vec::new();
    for r in reports {
        if !kinds.contains(&r.attack) {
            kinds.push(r.attack);
        }
    }
    for kind in kinds {
        let mut rows: Vec<&AggregateReport> = reports.iter().filter(|r| r.attack == kind).collect();
        rows.sort_by(|a, b| a.epsilon.total_cmp(&b.epsilon));
        for pair in rows.windows(2) {
            if pair[1].mean_cost < pair[0].mean_cost {
                flags.push((kind, pair[1].epsilon));
            }
        }
    }
    flags
}

/// Build an attacker for a sweep from whatever models are available.
pub fn make_attacker<'a>(
    kind: AttackKind,
    epsilon: f64,
    base: &AttackConfig,
    surrogate: Option<&'a SurrogateModels>,
    privileged: Option<&'a PrivilegedVictim>,
) -> Result<Attacker<'a>> {
    let config = AttackConfig { kind, epsilon, ..*base };
    config.validate()?;
    match kind {
        AttackKind::None => Ok(Attacker::None),
        AttackKind::Random => Ok(Attacker::Random { epsilon }),
        AttackKind::Icrl => surrogate
            .map(|models| Attacker::Icrl { models, config })
            .ok_or_else(|| Error::InvalidConfig("icrl attack needs surrogate models".into())),
        _ => privileged
            .map(|victim| Attacker::Baseline { victim, config })
            .ok_or_else(|| Error::InvalidConfig(format!("{kind} needs the victim's critics"))),
    }
}
