//! Randomized property suites over the core contracts.

mod common;

use derm_core::hedging::{wealth_rollout, HedgePolicy, HedgingSpec, WealthMode};
use derm_core::markets::{prices_from_returns, returns_from_prices, simulate_heston};
use derm_core::nn::Activation;
use derm_core::rng::substream;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn network_gradients_match_finite_differences(seed in any::<u64>(), bn in any::<bool>(), tanh in any::<bool>()) {
        let act = if tanh { Activation::Tanh } else { Activation::Sigmoid };
        let err = common::mlp_gradient_error(seed, act, bn);
        prop_assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn stopped_mass_is_one(seed in any::<u64>(), n in 1usize..200) {
        prop_assert!(common::xi_mass_error(seed, n) <= 1e-12);
    }

    #[test]
    fn indicator_relaxation_is_the_sharp_rule(seed in any::<u64>(), max_call in any::<bool>()) {
        prop_assert_eq!(common::relaxed_minus_sharp(seed, max_call), 0.0);
    }

    #[test]
    fn max_call_rule_is_star_shaped(seed in any::<u64>()) {
        let (checked, violations) = common::star_shape_violations(seed);
        prop_assert_eq!(violations, 0, "{} checks", checked);
    }

    #[test]
    fn black_scholes_parity(seed in any::<u64>()) {
        prop_assert!(common::parity_error(seed, 50) < 1e-12);
    }

    #[test]
    fn wealth_translation_leaves_error_variance(seed in any::<u64>(), x0 in -5.0f64..5.0, shift in -20.0f64..20.0) {
        let spec = HedgingSpec::table(100.0, WealthMode::Fixed { x: x0 });
        let policy = HedgePolicy::default_for(&spec, &mut substream(seed, "init", 0)).unwrap();
        let batch = simulate_heston(&spec.market, &spec.mesh, 256, &mut substream(seed, "paths", 0)).unwrap();
        let a = wealth_rollout(&policy, x0, &batch, &spec).unwrap();
        let b = wealth_rollout(&policy, x0 + shift, &batch, &spec).unwrap();
        prop_assert!((a.error_variance - b.error_variance).abs() <= 1e-10);
        prop_assert!((a.mean_error - b.mean_error - shift).abs() <= 1e-10);
    }

    #[test]
    fn returns_reconstruct_prices(seed in any::<u64>(), paths in 1usize..6, steps in 1usize..8, dim in 1usize..4) {
        use rand::Rng;
        let mut rng = substream(seed, "recon", 0);
        let prices: Vec<f64> = (0..paths * (steps + 1) * dim).map(|_| rng.random_range(1.0..200.0)).collect();
        let r = returns_from_prices(&prices, paths, steps, dim).unwrap();
        let initial: Vec<f64> = (0..paths).flat_map(|i| prices[i * (steps + 1) * dim..i * (steps + 1) * dim + dim].to_vec()).collect();
        let back = prices_from_returns(&initial, &r, paths, steps, dim);
        for (a, b) in prices.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs());
        }
    }
}

#[test]
fn discounted_prices_are_martingales() {
    assert!(common::gbm_martingale_z(11, 1 << 17) < 3.0);
    assert!(common::heston_martingale_z(12, 1 << 16) < 3.0);
}
