//! Drive each toy environment with a simple hand-written controller, then
//! save and reload the rollouts as a demonstration dataset.
//!
//! ```text
//! cargo run --example env_rollouts
//! ```

use safe_rl_attack::envs::{read_demo_dataset, rollout, write_demo_dataset, EnvKind, EnvSpec, Trajectory};

/// Push towards +x at a target speed while damping sideways motion.
fn cruise(target_speed: f64) -> impl Fn(&[f64]) -> safe_rl_attack::Result<Vec<f64>> {
    move |s| {
        Ok(vec![
            (2.0 * (target_speed - s[2])).clamp(-1.0, 1.0),
            (-s[3] - s[1]).clamp(-1.0, 1.0),
        ])
    }
}

fn main() -> safe_rl_attack::Result<()> {
    for kind in EnvKind::ALL {
        let spec = EnvSpec::new(kind);
        for speed in [0.5, 2.0] {
            let t = rollout(&spec, 0, cruise(speed))?;
            println!(
                "{kind:<14} target speed {speed}: return {:>7.3}  cost {:>5} / limit {}",
                t.total_reward(),
                t.total_cost(),
                spec.cost_limit
            );
        }
    }

    let spec = EnvSpec::new(EnvKind::PointVelocity);
    let trajectories: Vec<Trajectory> = (0..5)
        .map(|seed| rollout(&spec, seed, cruise(0.6)))
        .collect::<Result<_, _>>()?;
    let dir = std::env::temp_dir().join("safe-rl-attack-demos");
    let manifest = write_demo_dataset(&dir, &spec, &trajectories)?;
    let (_, back) = read_demo_dataset(&dir)?;
    println!(
        "wrote {} files for seeds {:?} to {}",
        back.len(),
        manifest.seeds,
        dir.display()
    );
    println!(
        "first rows:\n{}",
        trajectories[0]
            .to_csv(&spec)
            .lines()
            .take(3)
            .collect::<Vec<_>>()
            .join("\n")
    );
    Ok(())
}
