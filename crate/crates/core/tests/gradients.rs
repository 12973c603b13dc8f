mod common;

use proptest::prelude::*;

#[test]
fn hundred_random_nets_match_finite_differences() {
    for seed in 0..100 {
        let err = common::dense_net_gradient_error(seed);
        assert!(err < 1e-4, "net {seed}: relative error {err:e}");
    }
}

#[test]
fn every_model_kind_matches_finite_differences() {
    for seed in 0..100 {
        let err = common::model_gradient_error(seed).unwrap();
        assert!(err < 1e-4, "models {seed}: relative error {err:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradients_hold_for_any_seed(seed in any::<u64>()) {
        prop_assert!(common::dense_net_gradient_error(seed) < 1e-4);
    }
}
