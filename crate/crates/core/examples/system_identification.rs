//! Fit a one-step dynamics model from logged transitions and measure how
//! well it predicts held-out trajectories and how sensitive it is to its
//! inputs.
//!
//! ```text
//! cargo run --release --example system_identification -- BallRun
//! ```

use rand::Rng as _;
use safe_rl_attack::envs::{rollout, EnvKind, EnvSpec};
use safe_rl_attack::icrl::steps_of;
use safe_rl_attack::rng;
use safe_rl_attack::sysid::{estimate_dynamics_lipschitz, train_dynamics, SysidConfig};

fn main() -> safe_rl_attack::Result<()> {
    let kind: EnvKind = std::env::args().nth(1).as_deref().unwrap_or("BallRun").parse()?;
    let spec = EnvSpec::new(kind);
    let episodes: Vec<_> = (0..60)
        .map(|seed| {
            let mut r = rng::derived(seed, 3);
            let t = rollout(&spec, seed, |s| {
                Ok(vec![
                    r.random_range(-1.0..1.0) - 0.3 * s[2],
                    r.random_range(-1.0..1.0) - 0.3 * s[3],
                ])
            })?;
            Ok(steps_of(&t))
        })
        .collect::<safe_rl_attack::Result<_>>()?;

    let model = train_dynamics(&episodes, &SysidConfig::default())?;
    println!(
        "held-out mse per state dimension {:?}",
        model.heldout_mse.as_deref().unwrap_or_default()
    );
    if model.failed {
        println!("warning: the fit missed the configured threshold");
    }

    let probe = &episodes[0][50];
    let predicted = model.predict(&probe.state, &probe.action)?;
    println!("true next state      {:?}", probe.next_state);
    println!("predicted next state {predicted:?}");

    let pairs: Vec<_> = episodes
        .iter()
        .flatten()
        .map(|s| (s.state.clone(), s.action.clone()))
        .collect();
    for radius in [0.05, 0.2] {
        let l = estimate_dynamics_lipschitz(|s, a| model.predict(s, a), &pairs, radius, 1000, 0)?;
        println!("sampled Lipschitz constant within {radius}: {:.4}", l.value);
    }
    Ok(())
}
