mod common;

use proptest::prelude::*;
use safe_rl_attack::attacks::{icrl_attack, random_attack, sign_ascent, AccessLevel, AttackConfig, AttackKind};
use safe_rl_attack::envs::{ground_truth_cost, EnvKind, EnvSpec};
use safe_rl_attack::pipeline::{evaluate, run_episode, Attacker, VictimHandle};
use safe_rl_attack::rng;

#[test]
fn signed_ascent_is_near_optimal_on_smooth_objectives() {
    for seed in 0..20 {
        for eps in [0.05, 0.1] {
            let c = common::ascent_grid_check(seed, eps, 10, 0.25);
            assert!(
                c.holds(),
                "objective {seed} eps {eps}: grid {} ascent {} tol {}",
                c.grid_best,
                c.ascent_value,
                c.tolerance
            );
        }
    }
}

#[test]
fn zero_budget_is_bit_identical_to_no_attack() {
    let surrogate = common::toy_surrogate(3);
    for kind in [EnvKind::PointVelocity, EnvKind::BallRun] {
        let spec = EnvSpec::new(kind);
        let victim = VictimHandle::new(common::toy_policy(1));
        let (clean, clean_eps) = evaluate(&spec, &victim, &Attacker::None, 4, 100).unwrap();
        let attackers = [
            Attacker::Random { epsilon: 0.0 },
            Attacker::Icrl {
                models: &surrogate,
                config: AttackConfig::new(AttackKind::Icrl, 0.0),
            },
        ];
        for attacker in attackers {
            let (rep, eps) = evaluate(&spec, &victim, &attacker, 4, 100).unwrap();
            assert_eq!(rep.mean_cost.to_bits(), clean.mean_cost.to_bits());
            assert_eq!(rep.mean_return.to_bits(), clean.mean_return.to_bits());
            for (a, b) in eps.iter().zip(&clean_eps) {
                assert_eq!(a.trajectory, b.trajectory);
            }
        }
    }
}

#[test]
fn surrogate_attack_only_queries_the_victim_to_act() {
    let spec = EnvSpec::new(EnvKind::PointVelocity);
    let victim = VictimHandle::new(common::toy_policy(2));
    let surrogate = common::toy_surrogate(5);
    let attacker = Attacker::Icrl {
        models: &surrogate,
        config: AttackConfig::new(AttackKind::Icrl, 0.1),
    };
    let record = run_episode(&spec, &victim, &attacker, 9).unwrap();
    assert_eq!(victim.queries(), spec.horizon);
    assert_eq!(record.trajectory.len(), spec.horizon);
    let p = icrl_attack(
        &[0.1, 0.0, 0.2, 0.0],
        &surrogate,
        &AttackConfig::new(AttackKind::Icrl, 0.1),
    )
    .unwrap();
    assert_eq!(p.access, AccessLevel::Trajectories);
}

#[test]
fn reported_costs_come_from_the_environment_not_the_learned_cost() {
    let spec = EnvSpec::new(EnvKind::PointVelocity);
    let victim = VictimHandle::new(common::toy_policy(4));
    let mut corrupted = common::toy_surrogate(6);
    for w in corrupted.constraint.model.net.weights_mut() {
        *w = 50.0;
    }
    let attacker = Attacker::Icrl {
        models: &corrupted,
        config: AttackConfig::new(AttackKind::Icrl, 0.1),
    };
    let (report, episodes) = evaluate(&spec, &victim, &attacker, 3, 0).unwrap();
    let mut total = 0.0;
    for e in &episodes {
        let truth: f64 = e
            .trajectory
            .transitions
            .iter()
            .map(|t| ground_truth_cost(&spec, &t.state, &t.action, &t.next_state))
            .sum();
        assert_eq!(e.metrics.total_cost, truth);
        total += truth;
    }
    assert_eq!(report.mean_cost, total / 3.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_attacked_step_respects_the_budget(seed in 0u64..10_000, eps in 0.0f64..0.5) {
        let spec = EnvSpec::new(EnvKind::BallRun);
        let victim = VictimHandle::new(common::toy_policy(seed));
        let surrogate = common::toy_surrogate(seed + 1);
        let attackers = [
            Attacker::Random { epsilon: eps },
            Attacker::Icrl { models: &surrogate, config: AttackConfig::new(AttackKind::Icrl, eps) },
        ];
        for attacker in attackers {
            let record = run_episode(&spec, &victim, &attacker, seed).unwrap();
            for d in &record.deltas {
                prop_assert!(d.iter().all(|v| v.abs() <= eps));
            }
        }
    }

    #[test]
    fn ascent_and_random_offsets_stay_in_the_box(seed in any::<u64>(), eps in 0.0f64..1.0, iters in 1usize..20) {
        let objective = common::SyntheticObjective::from_seed(seed);
        let start = [0.3, -0.2];
        let p = sign_ascent(&start, &objective, eps, iters, 0.25, true, AccessLevel::Trajectories).unwrap();
        prop_assert!(p.norm() <= eps);
        let mut r = rng::seeded(seed);
        prop_assert!(random_attack(&start, eps, &mut r).norm() <= eps);
    }
}
