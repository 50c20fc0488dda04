use proptest::prelude::*;
use vpp_core::dispatch::{build_objective, partition_variance, Bound, ObjectiveParams};
use vpp_core::ensemble::{ConditionKey, LoadShapePair};
use vpp_oracles::covariance_sum;

proptest! {
    #[test]
    fn closed_form_matches_covariance_sum(n in 1usize..60, rho in 0.0f64..=1.0, sigma2 in 0.0f64..10.0) {
        let closed = partition_variance(n as f64, rho, sigma2);
        let brute = covariance_sum(n, rho, sigma2);
        prop_assert!((closed - brute).abs() <= 1e-9 * brute.max(1e-300));
    }

    #[test]
    fn objective_reconstructs_mean_and_variance(
        raw in prop::collection::vec((-8.0f64..8.0, 0.0f64..4.0, 0.0f64..500.0), 1..6),
        rho in 0.0f64..=1.0,
        lambda in 0.0f64..2.0,
        up in any::<bool>(),
    ) {
        let pairs: Vec<LoadShapePair> = raw
            .iter()
            .enumerate()
            .map(|(i, (m, v, _))| LoadShapePair::new(format!("v{i}"), ConditionKey::default(), vec![*m], vec![*v]).unwrap())
            .collect();
        let bound = if up { Bound::Up } else { Bound::Down };
        let (l, q) = build_objective(&pairs, &ObjectiveParams::new(bound, lambda, 0), rho).unwrap();
        let n: Vec<f64> = raw.iter().map(|r| r.2).collect();
        let obj: f64 = (0..n.len()).map(|j| l[j] * n[j] + q[j] * n[j] * n[j]).sum();
        let mean: f64 = (0..n.len()).map(|j| n[j] * pairs[j].mean[0]).sum();
        let var: f64 = (0..n.len()).map(|j| partition_variance(n[j], rho, pairs[j].variance[0])).sum();
        let expect = bound.sign() * mean + lambda * var;
        prop_assert!((obj - expect).abs() <= 1e-9 * (1.0 + expect.abs()));
    }
}
