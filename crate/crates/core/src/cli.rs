//! The `safe-rl-attack` command line: one subcommand per stage of the
//! attack workflow, each reading and writing files under one output
//! directory.
//!
//! Layout of the output directory:
//!
//! ```text
//! expert/policy.weights  expert/critics/  expert/log.csv
//! demos/manifest.toml    demos/traj_NNNN.csv
//! icrl/psi.weights       icrl/learner.weights  icrl/log.csv  icrl/summary.csv
//! sysid/dynamics.weights sysid/heldout.csv
//! attacks/<kind>_eps<e>.csv  attacks/<kind>_eps<e>/traj_NNNN.csv
//! sweep.csv  sweep.svg  bounds.csv  transfer.csv  report.csv  report.svg
//! ```
//!
//! Every CSV starts with a `# config_hash=...` comment identifying the
//! configuration that produced it.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{AttackConfig, AttackKind, PrivilegedVictim, SurrogateBase, SurrogateModels};
use crate::bounds::{self, LipschitzMethod, OnPolicyPsi};
use crate::chart;
use crate::envs::{self, BlackBoxEnv, EnvKind, EnvSpec, Trajectory, Transition};
use crate::error::{Error, Result};
use crate::expert::{self, CriticPair, ExpertConfig};
use crate::icrl::{self, ConstraintModel, IcrlConfig};
use crate::pipeline::{self, AggregateReport, Attacker, VictimHandle};
use crate::policy::Policy;
use crate::sysid::{self, DynamicsModel, SysidConfig};

#[derive(Parser, Debug)]
#[command(
    name = "safe-rl-attack",
    version,
    about = "Observation attacks on constrained RL policies"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Train the victim policy and its reward/cost critics.
    TrainExpert,
    /// Roll out the victim and save demonstration trajectories.
    CollectDemos,
    /// Infer a constraint network and a learner policy from the demonstrations.
    TrainIcrl,
    /// Fit a one-step dynamics model on the demonstrations.
    TrainDynamics,
    /// Evaluate one attack at one budget next to the unattacked victim.
    Attack,
    /// Evaluate every configured attack kind at every budget.
    Sweep,
    /// Audit the per-episode cost bound and the transfer rate.
    Bounds,
    /// Merge attack and sweep results into one report and chart.
    Report,
}

/// Flags that override the configuration file.
#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub env: Option<EnvKind>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    #[arg(long, global = true)]
    pub attack: Option<AttackKind>,
    /// Demonstration count for `collect-demos`, evaluation episodes elsewhere.
    #[arg(long, global = true)]
    pub episodes: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs instead of skipping.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoPlan {
    pub episodes: usize,
    pub seed_base: u64,
}

impl Default for DemoPlan {
    fn default() -> Self {
        Self {
            episodes: 100,
            seed_base: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationPlan {
    pub episodes: usize,
    /// Evaluation episodes use seeds `seed_base, seed_base + 1, ...`
    /// regardless of the top-level seed, so every attack sees the same starts.
    pub seed_base: u64,
}

impl Default for EvaluationPlan {
    fn default() -> Self {
        Self {
            episodes: 50,
            seed_base: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackPlan {
    /// Kinds evaluated by `sweep`; the first is the default for `attack`.
    pub kinds: Vec<AttackKind>,
    /// Budgets; the environment's default grid when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilons: Option<Vec<f64>>,
    pub iterations: usize,
    pub step_size: f64,
    pub surrogate_base: SurrogateBase,
}

impl Default for AttackPlan {
    fn default() -> Self {
        Self {
            kinds: vec![
                AttackKind::Icrl,
                AttackKind::Pgd,
                AttackKind::MaxReward,
                AttackKind::MaxCost,
            ],
            epsilons: None,
            iterations: 10,
            step_size: 0.25,
            surrogate_base: SurrogateBase::TrueState,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsPlan {
    pub episodes: usize,
    /// Sampled pairs per Lipschitz estimate.
    pub draws: usize,
    pub method: LipschitzMethod,
}

impl Default for BoundsPlan {
    fn default() -> Self {
        Self {
            episodes: 50,
            draws: 2000,
            method: LipschitzMethod::GradNormMax,
        }
    }
}

/// Everything one experiment needs. Every field has a default, so an empty
/// file is a valid configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub env: EnvKind,
    /// Master seed. It replaces the `seed` keys of the training sections and
    /// offsets the demonstration seeds.
    pub seed: u64,
    pub out: PathBuf,
    pub demos: DemoPlan,
    pub evaluation: EvaluationPlan,
    pub expert: ExpertConfig,
    /// Per-environment defaults when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub icrl: Option<IcrlConfig>,
    pub sysid: SysidConfig,
    pub attack: AttackPlan,
    pub bounds: BoundsPlan,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::PointVelocity,
            seed: 0,
            out: PathBuf::from("out"),
            demos: DemoPlan::default(),
            evaluation: EvaluationPlan::default(),
            expert: ExpertConfig::default(),
            icrl: None,
            sysid: SysidConfig::default(),
            attack: AttackPlan::default(),
            bounds: BoundsPlan::default(),
        }
    }
}

/// Byte offset to 1-based `(line, column)`.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

impl ExperimentConfig {
    /// Parse TOML. Unknown keys and type errors report their line and column.
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| {
            let at = e
                .span()
                .map(|s| {
                    let (l, c) = line_col(text, s.start);
                    format!("line {l}, column {c}: ")
                })
                .unwrap_or_default();
            Error::InvalidConfig(format!("{at}{}", e.message().replace('\n', " ")))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::InvalidConfig(format!("{}: {}", path.display(), e)))
    }

    pub fn validate(&self) -> Result<()> {
        self.expert.validate()?;
        self.icrl().validate()?;
        if self.demos.episodes == 0 || self.evaluation.episodes == 0 || self.bounds.episodes == 0 {
            return Err(Error::InvalidConfig("episode counts must be at least 1".into()));
        }
        if self.attack.kinds.is_empty() {
            return Err(Error::InvalidConfig("attack.kinds is empty".into()));
        }
        let eps = self.epsilons();
        if eps.is_empty() {
            return Err(Error::InvalidConfig("attack.epsilons is empty".into()));
        }
        for &e in &eps {
            AttackConfig {
                epsilon: e,
                ..self.attack_config(AttackKind::None)
            }
            .validate()?;
        }
        Ok(())
    }

    /// Hex prefix of the SHA-256 of the configuration, ignoring the output
    /// directory.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out = PathBuf::new();
        let text = canonical.to_toml().unwrap_or_default();
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).fold(String::new(), |mut s, b| {
            write!(s, "{b:02x}").unwrap();
            s
        })
    }

    pub fn epsilons(&self) -> Vec<f64> {
        self.attack
            .epsilons
            .clone()
            .unwrap_or_else(|| self.env.default_epsilons())
    }

    pub fn expert_config(&self) -> ExpertConfig {
        ExpertConfig {
            seed: self.seed,
            ..self.expert.clone()
        }
    }

    pub fn icrl(&self) -> IcrlConfig {
        let mut c = self.icrl.clone().unwrap_or_else(|| IcrlConfig::for_env(self.env));
        c.seed = self.seed;
        c
    }

    pub fn sysid_config(&self) -> SysidConfig {
        SysidConfig {
            seed: self.seed,
            ..self.sysid.clone()
        }
    }

    pub fn demo_seed_base(&self) -> u64 {
        self.demos.seed_base.wrapping_add(self.seed.wrapping_mul(1 << 20))
    }

    pub fn attack_config(&self, kind: AttackKind) -> AttackConfig {
        AttackConfig {
            kind,
            epsilon: 0.0,
            iterations: self.attack.iterations,
            step_size: self.attack.step_size,
            surrogate_base: self.attack.surrogate_base,
        }
    }

    /// Fold command-line overrides in. `episodes` is routed by subcommand.
    pub fn apply(&mut self, o: &Overrides, command: Command) {
        if let Some(env) = o.env {
            self.env = env;
        }
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(eps) = o.epsilon {
            self.attack.epsilons = Some(vec![eps]);
        }
        if let Some(kind) = o.attack {
            self.attack.kinds = vec![kind];
        }
        if let Some(n) = o.episodes {
            match command {
                Command::CollectDemos => self.demos.episodes = n,
                Command::Bounds => self.bounds.episodes = n,
                _ => self.evaluation.episodes = n,
            }
        }
    }
}

/// Paths of every artifact under the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn expert_policy(&self) -> PathBuf {
        self.root.join("expert/policy.weights")
    }
    pub fn expert_critics(&self) -> PathBuf {
        self.root.join("expert/critics")
    }
    pub fn expert_log(&self) -> PathBuf {
        self.root.join("expert/log.csv")
    }
    pub fn demos(&self) -> PathBuf {
        self.root.join("demos")
    }
    pub fn psi(&self) -> PathBuf {
        self.root.join("icrl/psi.weights")
    }
    pub fn learner(&self) -> PathBuf {
        self.root.join("icrl/learner.weights")
    }
    pub fn icrl_log(&self) -> PathBuf {
        self.root.join("icrl/log.csv")
    }
    pub fn icrl_summary(&self) -> PathBuf {
        self.root.join("icrl/summary.csv")
    }
    pub fn dynamics(&self) -> PathBuf {
        self.root.join("sysid/dynamics.weights")
    }
    pub fn heldout(&self) -> PathBuf {
        self.root.join("sysid/heldout.csv")
    }
    pub fn attacks(&self) -> PathBuf {
        self.root.join("attacks")
    }
    /// Directory holding the attacked trajectories of one run.
    pub fn attack_dir(&self, kind: AttackKind, epsilon: f64) -> PathBuf {
        self.attacks().join(format!("{kind}_eps{epsilon:?}"))
    }
    pub fn attack_csv(&self, kind: AttackKind, epsilon: f64) -> PathBuf {
        self.attacks().join(format!("{kind}_eps{epsilon:?}.csv"))
    }
    pub fn sweep(&self) -> PathBuf {
        self.root.join("sweep.csv")
    }
    pub fn bounds(&self) -> PathBuf {
        self.root.join("bounds.csv")
    }
    pub fn transfer(&self) -> PathBuf {
        self.root.join("transfer.csv")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.csv")
    }
}

struct Session {
    config: ExperimentConfig,
    spec: EnvSpec,
    layout: Layout,
    stamp: String,
    force: bool,
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

impl Session {
    /// `true` when `output` exists and should be left alone.
    fn skip(&self, output: &Path) -> bool {
        if output.exists() && !self.force {
            eprintln!("skip: {} exists; pass --force to overwrite", output.display());
            return true;
        }
        false
    }

    fn write(&self, path: &Path, body: &str) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, body)?;
        Ok(())
    }

    fn write_csv(&self, path: &Path, body: &str) -> Result<()> {
        self.write(path, &format!("{}{body}", self.stamp))
    }

    fn expert_std(&self) -> f64 {
        self.config.expert.ppo.std_end
    }

    fn load_expert(&self) -> Result<Policy> {
        let path = self.layout.expert_policy();
        require(&path)?;
        Policy::load(&path, self.spec.action_bounds.clone(), self.expert_std())
    }

    fn load_victim(&self) -> Result<VictimHandle> {
        Ok(VictimHandle::new(self.load_expert()?))
    }

    fn load_demos(&self) -> Result<Vec<Trajectory>> {
        let (manifest, demos) = envs::read_demo_dataset(&self.layout.demos())?;
        if manifest.env != self.spec.kind {
            return Err(Error::InvalidConfig(format!(
                "demonstrations are from {} but the configuration names {}",
                manifest.env, self.spec.kind
            )));
        }
        Ok(demos)
    }

    fn load_psi(&self) -> Result<ConstraintModel> {
        require(&self.layout.psi())?;
        ConstraintModel::load(&self.layout.psi())
    }

    fn load_surrogates(&self) -> Result<SurrogateModels> {
        require(&self.layout.learner())?;
        require(&self.layout.dynamics())?;
        let learner = Policy::load(
            &self.layout.learner(),
            self.spec.action_bounds.clone(),
            self.config.icrl().ppo.std_end,
        )?;
        let models = SurrogateModels {
            learner,
            dynamics: DynamicsModel::load(&self.layout.dynamics(), self.spec.state_dim)?,
            constraint: self.load_psi()?,
        };
        models.validate()?;
        Ok(models)
    }

    fn load_privileged(&self) -> Result<PrivilegedVictim> {
        require(&self.layout.expert_critics())?;
        Ok(PrivilegedVictim {
            policy: self.load_expert()?,
            critics: Some(CriticPair::load(&self.layout.expert_critics())?),
        })
    }

    /// Models the given attack kinds need, loaded once.
    fn attack_models(&self, kinds: &[AttackKind]) -> Result<(Option<SurrogateModels>, Option<PrivilegedVictim>)> {
        let surrogate = if kinds.contains(&AttackKind::Icrl) {
            Some(self.load_surrogates()?)
        } else {
            None
        };
        let privileged = if kinds.iter().any(|k| k.is_baseline()) {
            Some(self.load_privileged()?)
        } else {
            None
        };
        Ok((surrogate, privileged))
    }
}

fn train_expert(s: &Session) -> Result<()> {
    if s.skip(&s.layout.expert_policy()) {
        return Ok(());
    }
    let outcome = expert::train_expert(&s.spec, &s.config.expert_config())?;
    if let Some(w) = &outcome.warning {
        eprintln!("warning: {w}");
    }
    std::fs::create_dir_all(s.layout.expert_critics())?;
    outcome.policy.save(&s.layout.expert_policy())?;
    outcome.critics.save(&s.layout.expert_critics())?;
    s.write_csv(&s.layout.expert_log(), &expert::log_csv(&outcome.log))?;
    let (ret, cost) = expert::evaluate_deterministic(
        &s.spec,
        &outcome.policy,
        s.config.evaluation.seed_base,
        s.config.evaluation.episodes,
    )?;
    println!(
        "expert {}: return {ret:.3}, cost {cost:.3} (limit {})",
        s.spec.kind, s.spec.cost_limit
    );
    Ok(())
}

fn collect_demos(s: &Session) -> Result<()> {
    let manifest = s.layout.demos().join(envs::MANIFEST_FILE);
    if s.skip(&manifest) {
        return Ok(());
    }
    let policy = s.load_expert()?;
    let demos = expert::collect_demos(&s.spec, &policy, s.config.demos.episodes, s.config.demo_seed_base())?;
    envs::write_demo_dataset_with_preamble(&s.layout.demos(), &s.spec, &demos, &s.stamp)?;
    let cost = demos.iter().map(Trajectory::total_cost).sum::<f64>() / demos.len() as f64;
    println!("demonstrations: {} episodes, mean cost {cost:.3}", demos.len());
    Ok(())
}

fn train_icrl(s: &Session) -> Result<()> {
    if s.skip(&s.layout.psi()) {
        return Ok(());
    }
    let demos = s.load_demos()?;
    let env = BlackBoxEnv::new(s.spec.clone());
    let outcome = icrl::train_icrl(&env, &demos, &s.config.icrl())?;
    std::fs::create_dir_all(s.layout.psi().parent().unwrap())?;
    outcome.constraint.save(&s.layout.psi())?;
    outcome.learner.save(&s.layout.learner())?;
    s.write_csv(&s.layout.icrl_log(), &icrl::log_csv(&outcome.log))?;
    let last = outcome.log.last();
    let summary = format!(
        "slack,final_margin,learner_return,expert_psi_cost\n{:?},{:?},{:?},{:?}\n",
        outcome.slack,
        last.map_or(f64::NAN, |r| r.margin),
        last.map_or(f64::NAN, |r| r.learner_return),
        last.map_or(f64::NAN, |r| r.expert_psi_cost),
    );
    s.write_csv(&s.layout.icrl_summary(), &summary)?;
    println!("constraint inferred: slack {:.4}", outcome.slack);
    Ok(())
}

fn train_dynamics(s: &Session) -> Result<()> {
    if s.skip(&s.layout.dynamics()) {
        return Ok(());
    }
    let demos = s.load_demos()?;
    let episodes: Vec<_> = demos.iter().map(icrl::steps_of).collect();
    let model = sysid::train_dynamics(&episodes, &s.config.sysid_config())?;
    std::fs::create_dir_all(s.layout.dynamics().parent().unwrap())?;
    model.save(&s.layout.dynamics())?;
    let mut csv = String::from("dimension,mse\n");
    for (i, m) in model.heldout_mse.iter().flatten().enumerate() {
        writeln!(csv, "{i},{m:?}").unwrap();
    }
    s.write_csv(&s.layout.heldout(), &csv)?;
    if model.failed {
        eprintln!("warning: held-out error above {}", s.config.sysid.mse_threshold);
    }
    println!(
        "dynamics fitted: held-out mse {:?}",
        model.heldout_mse.unwrap_or_default()
    );
    Ok(())
}

fn print_reports(reports: &[AggregateReport]) {
    for r in reports {
        println!(
            "{:<10} eps {:<6} cost {:>9.3} ± {:<8.3} return {:>9.3} violations {:.2}",
            r.attack.name(),
            r.epsilon,
            r.mean_cost,
            r.std_cost,
            r.mean_return,
            r.violation_rate
        );
    }
}

fn attack(s: &Session) -> Result<()> {
    let kind = s.config.attack.kinds[0];
    let epsilon = *s.config.epsilons().last().unwrap();
    let csv_path = s.layout.attack_csv(kind, epsilon);
    if s.skip(&csv_path) {
        return Ok(());
    }
    let victim = s.load_victim()?;
    let (surrogate, privileged) = s.attack_models(&[kind])?;
    let attacker = pipeline::make_attacker(
        kind,
        epsilon,
        &s.config.attack_config(kind),
        surrogate.as_ref(),
        privileged.as_ref(),
    )?;
    let (episodes, seed_base) = (s.config.evaluation.episodes, s.config.evaluation.seed_base);
    let (clean, _) = pipeline::evaluate(&s.spec, &victim, &Attacker::None, episodes, seed_base)?;
    let (report, records) = pipeline::evaluate(&s.spec, &victim, &attacker, episodes, seed_base)?;
    let worst = records
        .iter()
        .flat_map(|r| &r.deltas)
        .map(|d| d.iter().fold(0.0f64, |m, x| m.max(x.abs())))
        .fold(0.0f64, f64::max);
    let trajectories: Vec<Trajectory> = records.into_iter().map(|r| r.trajectory).collect();
    envs::write_demo_dataset_with_preamble(&s.layout.attack_dir(kind, epsilon), &s.spec, &trajectories, &s.stamp)?;
    let reports = if kind == AttackKind::None {
        vec![clean]
    } else {
        vec![clean, report]
    };
    s.write_csv(&csv_path, &pipeline::report_csv(&reports))?;
    print_reports(&reports);
    println!("largest perturbation {worst:?} (budget {epsilon:?})");
    Ok(())
}

fn sweep(s: &Session) -> Result<()> {
    if s.skip(&s.layout.sweep()) {
        return Ok(());
    }
    let kinds = s.config.attack.kinds.clone();
    let victim = s.load_victim()?;
    let (surrogate, privileged) = s.attack_models(&kinds)?;
    let reports = pipeline::attack_sweep(
        &s.spec,
        &victim,
        &kinds,
        &s.config.epsilons(),
        s.config.evaluation.episodes,
        s.config.evaluation.seed_base,
        |kind, eps| {
            pipeline::make_attacker(
                kind,
                eps,
                &s.config.attack_config(kind),
                surrogate.as_ref(),
                privileged.as_ref(),
            )
        },
    )?;
    s.write_csv(&s.layout.sweep(), &pipeline::report_csv(&reports))?;
    s.write(
        &s.layout.sweep().with_extension("svg"),
        &chart::sweep_chart_svg(&format!("{} sweep", s.spec.kind), &reports),
    )?;
    print_reports(&reports);
    for (kind, eps) in pipeline::monotonicity_flags(&reports) {
        eprintln!("notice: {kind} cost dropped at eps {eps}");
    }
    Ok(())
}

pub const TRANSFER_CSV_HEADER: &str = "env,attack,epsilon,threshold,max_error,flagged,confirmed,transfer_rate";

fn bounds(s: &Session) -> Result<()> {
    if s.skip(&s.layout.bounds()) {
        return Ok(());
    }
    let expert_policy = s.load_expert()?;
    let models = s.load_surrogates()?;
    let demos = s.load_demos()?;
    let victim = VictimHandle::new(expert_policy.clone());
    let calibration: Vec<Transition> = demos.iter().flat_map(|t| t.transitions.clone()).collect();
    let states: Vec<Vec<f64>> = calibration.iter().map(|t| t.state.clone()).collect();
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = calibration
        .iter()
        .map(|t| (t.state.clone(), t.action.clone()))
        .collect();
    let plan = &s.config.bounds;
    let (episodes, seed_base) = (plan.episodes, s.config.evaluation.seed_base);
    let (_, clean) = pipeline::evaluate(&s.spec, &victim, &Attacker::None, episodes, seed_base)?;

    let mut bound_rows = format!("{}\n", bounds::BOUND_CSV_HEADER);
    let mut transfer_rows = format!("{TRANSFER_CSV_HEADER}\n");
    for epsilon in s.config.epsilons() {
        if epsilon <= 0.0 {
            eprintln!("notice: skipping eps {epsilon:?}; the bound is zero");
            continue;
        }
        let field = OnPolicyPsi {
            psi: &models.constraint,
            policy: &expert_policy,
        };
        let l_psi = bounds::estimate_psi_lipschitz(&field, &states, epsilon, plan.method, plan.draws, s.config.seed)?;
        let l_f = sysid::estimate_dynamics_lipschitz(
            |st, a| models.dynamics.predict(st, a),
            &pairs,
            epsilon,
            plan.draws,
            s.config.seed,
        )?;
        let config = AttackConfig {
            epsilon,
            ..s.config.attack_config(AttackKind::Icrl)
        };
        let icrl_attacker = Attacker::Icrl {
            models: &models,
            config,
        };
        let (_, attacked) = pipeline::evaluate(&s.spec, &victim, &icrl_attacker, episodes, seed_base)?;
        let reports = attacked
            .iter()
            .zip(&clean)
            .map(|(a, c)| {
                bounds::episodic_bound_audit(
                    &a.observed_steps(),
                    &c.observed_steps(),
                    &models.constraint,
                    l_psi.value,
                    l_f.value,
                    epsilon,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let misses = reports.iter().filter(|r| !r.holds).count();
        let miss_rate = misses as f64 / reports.len() as f64;
        for r in &reports {
            writeln!(bound_rows, "{}", bounds::bound_csv_row(s.spec.kind, r, miss_rate)).unwrap();
        }
        println!(
            "eps {epsilon:?}: L_psi {:.4}, L_f {:.4}, bound misses {misses}/{}",
            l_psi.value,
            l_f.value,
            reports.len()
        );

        let random = Attacker::Random { epsilon };
        let (_, randomised) = pipeline::evaluate(&s.spec, &victim, &random, episodes, seed_base)?;
        for (kind, records) in [(AttackKind::Icrl, &attacked), (AttackKind::Random, &randomised)] {
            let steps: Vec<Transition> = records.iter().flat_map(|r| r.trajectory.transitions.clone()).collect();
            let t = bounds::transferability_check(
                &models.constraint,
                &s.spec,
                &steps,
                &calibration,
                models.constraint.threshold,
            )?;
            let rate = t.transfer_rate.map_or("undefined".to_string(), |r| format!("{r:?}"));
            writeln!(
                transfer_rows,
                "{},{kind},{epsilon:?},{:?},{:?},{},{},{rate}",
                s.spec.kind, t.threshold, t.max_error, t.flagged, t.confirmed
            )
            .unwrap();
            println!(
                "  {kind:<7} transfer rate {rate} ({} of {} flagged)",
                t.confirmed, t.flagged
            );
        }
    }
    s.write_csv(&s.layout.bounds(), &bound_rows)?;
    s.write_csv(&s.layout.transfer(), &transfer_rows)?;
    Ok(())
}

fn report(s: &Session) -> Result<()> {
    if s.skip(&s.layout.report()) {
        return Ok(());
    }
    let mut sources: Vec<PathBuf> = Vec::new();
    if s.layout.attacks().is_dir() {
        for entry in std::fs::read_dir(s.layout.attacks())? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "csv") {
                sources.push(path);
            }
        }
    }
    sources.sort();
    if s.layout.sweep().exists() {
        sources.push(s.layout.sweep());
    }
    if sources.is_empty() {
        return Err(Error::MissingArtifact(s.layout.attacks()));
    }
    let mut reports: Vec<AggregateReport> = Vec::new();
    for path in &sources {
        for r in pipeline::parse_report_csv(&std::fs::read_to_string(path)?)? {
            if !reports.contains(&r) {
                reports.push(r);
            }
        }
    }
    s.write_csv(&s.layout.report(), &pipeline::report_csv(&reports))?;
    s.write(
        &s.layout.report().with_extension("svg"),
        &chart::sweep_chart_svg(&format!("{} attacks", s.spec.kind), &reports),
    )?;
    print_reports(&reports);
    Ok(())
}

/// Run a parsed command line.
pub fn execute(cli: &Cli) -> Result<()> {
    let mut config = match &cli.overrides.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    config.apply(&cli.overrides, cli.command);
    config.validate()?;
    let session = Session {
        spec: EnvSpec::new(config.env),
        layout: Layout::new(&config.out),
        stamp: format!("# config_hash={}\n", config.hash()),
        force: cli.overrides.force,
        config,
    };
    match cli.command {
        Command::TrainExpert => train_expert(&session),
        Command::CollectDemos => collect_demos(&session),
        Command::TrainIcrl => train_icrl(&session),
        Command::TrainDynamics => train_dynamics(&session),
        Command::Attack => attack(&session),
        Command::Sweep => sweep(&session),
        Command::Bounds => bounds(&session),
        Command::Report => report(&session),
    }
}

/// Exit status for an error: 2 for a missing input artifact, 1 otherwise.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::MissingArtifact(_) => 2,
        _ => 1,
    }
}

fn error_kind(error: &Error) -> &'static str {
    match error {
        Error::MissingArtifact(_) => "missing_artifact",
        Error::InvalidConfig(_) => "config",
        Error::Parse { .. } => "parse",
        Error::Io(_) => "io",
        _ => "runtime",
    }
}

/// One-line `error kind=<kind> message="<text>"` description.
pub fn error_line(error: &Error) -> String {
    let message = error.to_string().replace('\n', " ");
    format!("error kind={} message={message:?}", error_kind(error))
}

/// Parse `args` (program name first), run, and return the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let first = e.to_string();
            let first = first
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("error kind=usage message={first:?}");
            return 1;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            exit_code(&e)
        }
    }
}
