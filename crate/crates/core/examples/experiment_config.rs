//! Build an experiment configuration in code, print it as the TOML the
//! command-line tool reads, and show how a bad key is reported.
//!
//! ```text
//! cargo run --example experiment_config
//! ```

use safe_rl_attack::cli::ExperimentConfig;
use safe_rl_attack::envs::EnvKind;

fn main() -> safe_rl_attack::Result<()> {
    let mut config = ExperimentConfig {
        env: EnvKind::BallRun,
        seed: 7,
        ..ExperimentConfig::default()
    };
    config.attack.epsilons = Some(vec![0.05, 0.1]);
    config.evaluation.episodes = 20;
    let text = config.to_toml()?;
    println!("{text}");
    println!("hash {}", config.hash());
    println!(
        "budgets {:?}, icrl rounds {}",
        config.epsilons(),
        config.icrl().outer_epochs
    );

    let back = ExperimentConfig::from_toml(&text)?;
    assert_eq!(back, config);

    match ExperimentConfig::from_toml("env = \"BallRun\"\n[attack]\nkinds = [\"icrl\"]\nbudget = 0.1\n") {
        Ok(_) => println!("unexpectedly accepted"),
        Err(e) => println!("rejected: {e}"),
    }
    Ok(())
}
