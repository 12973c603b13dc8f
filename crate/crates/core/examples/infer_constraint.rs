//! Recover a speed constraint from demonstrations alone. A scripted
//! demonstrator cruises just under the speed limit; the learned cost should
//! rise with speed even though the demonstrations never carry a cost signal.
//!
//! ```text
//! cargo run --release --example infer_constraint
//! ```

use rand::Rng as _;
use safe_rl_attack::envs::{rollout, BlackBoxEnv, EnvKind, EnvSpec, Trajectory};
use safe_rl_attack::icrl::{self, IcrlConfig};
use safe_rl_attack::rng;

fn main() -> safe_rl_attack::Result<()> {
    let spec = EnvSpec::new(EnvKind::PointVelocity);
    let demos: Vec<Trajectory> = (0..60)
        .map(|seed| {
            let mut noise = rng::derived(seed, 7);
            rollout(&spec, seed, |s| {
                let a = (2.0 * (0.65 - s[2])).clamp(-1.0, 1.0) + noise.random_range(-0.2..0.2);
                Ok(vec![a, -s[3] + noise.random_range(-0.2..0.2)])
            })
        })
        .collect::<Result<_, _>>()?;
    let demo_return = demos.iter().map(Trajectory::total_reward).sum::<f64>() / demos.len() as f64;
    println!("demonstrator return {demo_return:.2}");

    let outcome = icrl::train_icrl(&BlackBoxEnv::new(spec.clone()), &demos, &IcrlConfig::for_env(spec.kind))?;
    for row in outcome.log.iter().step_by(4) {
        println!(
            "round {:>2}  learner return {:>6.2}  learned cost: learner {:>7.2} demos {:>7.2}",
            row.epoch, row.learner_return, row.learner_psi_cost, row.expert_psi_cost
        );
    }
    println!("final slack {:.3}", outcome.slack);

    println!("learned cost along the x axis at rest position, full throttle:");
    for speed in [0.0, 0.25, 0.5, 0.75, 1.0, 1.5] {
        let psi = outcome.constraint.value(&[1.0, 0.0, speed, 0.0], &[1.0, 0.0])?;
        println!("  speed {speed:<4}  cost {psi:.3}");
    }
    Ok(())
}
