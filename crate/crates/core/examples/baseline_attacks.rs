//! Critic-guided baselines against a briefly trained victim. These attacks
//! read the victim's own gradients and critics, which the learned-constraint
//! attack never does.
//!
//! ```text
//! cargo run --release --example baseline_attacks -- 0.1
//! ```

use safe_rl_attack::attacks::{AttackConfig, AttackKind, PrivilegedVictim};
use safe_rl_attack::envs::{EnvKind, EnvSpec};
use safe_rl_attack::expert::{self, ExpertConfig};
use safe_rl_attack::pipeline::{evaluate, Attacker, VictimHandle};

fn main() -> safe_rl_attack::Result<()> {
    let epsilon: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let spec = EnvSpec::new(EnvKind::PointVelocity);
    let trained = expert::train_expert(
        &spec,
        &ExpertConfig {
            epochs: 40,
            ..ExpertConfig::default()
        },
    )?;
    let privileged = PrivilegedVictim {
        policy: trained.policy.clone(),
        critics: Some(trained.critics.clone()),
    };
    let victim = VictimHandle::new(trained.policy);

    let (clean, _) = evaluate(&spec, &victim, &Attacker::None, 20, 0)?;
    println!(
        "{:<10} cost {:>7.2}  return {:>7.3}",
        "none", clean.mean_cost, clean.mean_return
    );
    let (random, _) = evaluate(&spec, &victim, &Attacker::Random { epsilon }, 20, 0)?;
    println!(
        "{:<10} cost {:>7.2}  return {:>7.3}",
        "random", random.mean_cost, random.mean_return
    );
    for kind in [
        AttackKind::Fgsm,
        AttackKind::Pgd,
        AttackKind::MaxReward,
        AttackKind::MaxCost,
    ] {
        let attacker = Attacker::Baseline {
            victim: &privileged,
            config: AttackConfig::new(kind, epsilon),
        };
        let (rep, _) = evaluate(&spec, &victim, &attacker, 20, 0)?;
        println!(
            "{:<10} cost {:>7.2}  return {:>7.3}",
            kind.name(),
            rep.mean_cost,
            rep.mean_return
        );
    }
    Ok(())
}
