//! The full attack chain on one environment: train a victim, record its
//! demonstrations, infer a constraint and a learner from them, fit a
//! dynamics model, then compare the learned-constraint attack with a
//! random perturbation of the same budget.
//!
//! ```text
//! cargo run --release --example icrl_attack -- PointVelocity
//! ```

use std::time::Instant;

use safe_rl_attack::attacks::{AttackConfig, AttackKind, SurrogateBase, SurrogateModels};
use safe_rl_attack::envs::{BlackBoxEnv, EnvKind, EnvSpec};
use safe_rl_attack::expert::{self, ExpertConfig};
use safe_rl_attack::icrl::{self, IcrlConfig};
use safe_rl_attack::pipeline::{evaluate, Attacker, VictimHandle};
use safe_rl_attack::sysid::{self, SysidConfig};

fn main() -> safe_rl_attack::Result<()> {
    let kind: EnvKind = std::env::args().nth(1).as_deref().unwrap_or("PointVelocity").parse()?;
    let spec = EnvSpec::new(kind);
    let clock = Instant::now();
    let lap = |what: &str| println!("[{:>6.1}s] {what}", clock.elapsed().as_secs_f64());

    let trained = expert::train_expert(&spec, &ExpertConfig::default())?;
    lap("victim trained");
    let demos = expert::collect_demos(&spec, &trained.policy, 100, 10_000)?;
    lap("demonstrations collected");

    let env = BlackBoxEnv::new(spec.clone());
    let inferred = icrl::train_icrl(&env, &demos, &IcrlConfig::for_env(kind))?;
    for row in &inferred.log {
        println!(
            "  round {:>2}  learner return {:>7.2}  learner cost {:>7.2}  expert cost {:>7.2}",
            row.epoch, row.learner_return, row.learner_psi_cost, row.expert_psi_cost
        );
    }
    lap("constraint inferred");

    let episodes: Vec<_> = demos.iter().map(icrl::steps_of).collect();
    let dynamics = sysid::train_dynamics(&episodes, &SysidConfig::default())?;
    println!("  held-out mse per dimension {:?}", dynamics.heldout_mse);
    lap("dynamics fitted");

    let models = SurrogateModels {
        learner: inferred.learner.clone(),
        dynamics,
        constraint: inferred.constraint.clone(),
    };
    let (expert_ret, _) = expert::evaluate_deterministic(&spec, &trained.policy, 0, 20)?;
    let (learner_ret, _) = expert::evaluate_deterministic(&spec, &models.learner, 0, 20)?;
    println!("  expert return {expert_ret:.2}, learner return {learner_ret:.2}");

    let victim = VictimHandle::new(trained.policy.clone());
    let eps = *kind.default_epsilons().last().unwrap();
    let show = |label: &str, attacker: Attacker| -> safe_rl_attack::Result<()> {
        let (rep, _) = evaluate(&spec, &victim, &attacker, 50, 0)?;
        println!(
            "  {label:<22} cost {:>7.2} ± {:>6.2}  return {:>7.2}  violations {:.2}",
            rep.mean_cost, rep.std_cost, rep.mean_return, rep.violation_rate
        );
        Ok(())
    };
    show("none", Attacker::None)?;
    show("random", Attacker::Random { epsilon: eps })?;
    for base in [SurrogateBase::TrueState, SurrogateBase::PerturbedState] {
        let config = AttackConfig {
            surrogate_base: base,
            ..AttackConfig::new(AttackKind::Icrl, eps)
        };
        show(
            &format!("icrl {base:?}"),
            Attacker::Icrl {
                models: &models,
                config,
            },
        )?;
    }
    lap("evaluated");
    Ok(())
}
