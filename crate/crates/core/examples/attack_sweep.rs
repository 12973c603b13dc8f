//! Sweep random and critic-guided attacks over a budget grid and draw the
//! result as an SVG chart.
//!
//! ```text
//! cargo run --release --example attack_sweep -- sweep.svg
//! ```

use safe_rl_attack::attacks::{AttackConfig, AttackKind, PrivilegedVictim};
use safe_rl_attack::chart::sweep_chart_svg;
use safe_rl_attack::envs::{EnvKind, EnvSpec};
use safe_rl_attack::expert::{self, ExpertConfig};
use safe_rl_attack::pipeline::{attack_sweep, make_attacker, monotonicity_flags, report_csv, VictimHandle};

fn main() -> safe_rl_attack::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "sweep.svg".into());
    let spec = EnvSpec::new(EnvKind::BallCircle);
    let trained = expert::train_expert(
        &spec,
        &ExpertConfig {
            epochs: 40,
            ..ExpertConfig::default()
        },
    )?;
    let privileged = PrivilegedVictim {
        policy: trained.policy.clone(),
        critics: Some(trained.critics),
    };
    let victim = VictimHandle::new(trained.policy);

    let kinds = [AttackKind::Random, AttackKind::Pgd, AttackKind::MaxCost];
    let reports = attack_sweep(
        &spec,
        &victim,
        &kinds,
        &spec.kind.default_epsilons(),
        10,
        0,
        |kind, eps| make_attacker(kind, eps, &AttackConfig::new(kind, eps), None, Some(&privileged)),
    )?;
    print!("{}", report_csv(&reports));
    for (kind, eps) in monotonicity_flags(&reports) {
        println!("note: {kind} cost fell at eps {eps}");
    }
    std::fs::write(&out, sweep_chart_svg("BallCircle", &reports))?;
    println!("chart written to {out}");
    Ok(())
}
