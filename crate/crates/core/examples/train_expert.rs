//! Train a constrained victim policy on one environment and report how it
//! compares with a uniformly random policy.
//!
//! ```text
//! cargo run --example train_expert -- PointVelocity 60
//! ```

use safe_rl_attack::envs::{EnvKind, EnvSpec};
use safe_rl_attack::expert::{self, ExpertConfig};

fn main() -> safe_rl_attack::Result<()> {
    let mut args = std::env::args().skip(1);
    let kind: EnvKind = args.next().as_deref().unwrap_or("PointVelocity").parse()?;
    let epochs = args.next().and_then(|s| s.parse().ok()).unwrap_or(60);
    let spec = EnvSpec::new(kind);
    let config = ExpertConfig {
        epochs,
        ..ExpertConfig::default()
    };

    let started = std::time::Instant::now();
    let outcome = expert::train_expert(&spec, &config)?;
    for row in outcome.log.iter().step_by(5) {
        println!(
            "epoch {:>4}  return {:>8.3}  cost {:>7.2}  lambda {:.3}",
            row.epoch, row.mean_return, row.mean_cost, row.lambda
        );
    }
    let (ret, cost) = expert::evaluate_deterministic(&spec, &outcome.policy, 0, 20)?;
    let (rand_ret, rand_cost) = expert::random_policy_return(&spec, 0, 20)?;
    println!("selected epoch {:?}", outcome.selected_epoch);
    println!("expert  return {ret:.3}  cost {cost:.2}  (limit {})", spec.cost_limit);
    println!("random  return {rand_ret:.3}  cost {rand_cost:.2}");
    if let Some(w) = &outcome.warning {
        println!("warning: {w}");
    }
    println!("trained in {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}
