use proptest::prelude::*;
use vpp_core::ensemble::{mix, scale_mean, ConditionKey, LoadShapePair};

fn pairs_strategy() -> impl Strategy<Value = Vec<LoadShapePair>> {
    (1usize..6, 1usize..30).prop_flat_map(|(count, steps)| {
        prop::collection::vec(
            (
                prop::collection::vec(-10.0f64..10.0, steps),
                prop::collection::vec(0.0f64..5.0, steps),
            ),
            count,
        )
        .prop_map(|raw| {
            raw.into_iter()
                .enumerate()
                .map(|(i, (m, v))| {
                    LoadShapePair::new(format!("c{i}"), ConditionKey::default(), m, v).unwrap()
                })
                .collect()
        })
    })
}

fn simplex(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, len).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #[test]
    fn mix_is_order_free_and_bounded((pairs, w) in pairs_strategy().prop_flat_map(|p| { let n = p.len(); (Just(p), simplex(n)) })) {
        let out = mix(&pairs, &w).unwrap();
        let mut rev_pairs = pairs.clone();
        rev_pairs.reverse();
        let mut rev_w = w.clone();
        rev_w.reverse();
        let rev = mix(&rev_pairs, &rev_w).unwrap();
        for k in 0..out.len() {
            prop_assert!((out[k] - rev[k]).abs() <= 1e-12 * (1.0 + out[k].abs()));
            let lo = pairs.iter().map(|p| p.mean[k]).fold(f64::INFINITY, f64::min);
            let hi = pairs.iter().map(|p| p.mean[k]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out[k] >= lo - 1e-12 && out[k] <= hi + 1e-12);
        }
    }

    #[test]
    fn scale_mean_is_linear(pairs in pairs_strategy(), a in 0.0f64..5.0, b in 0.0f64..5.0) {
        let p = &pairs[0];
        let sa = scale_mean(p, a).unwrap();
        let sb = scale_mean(p, b).unwrap();
        let sab = scale_mean(p, a + b).unwrap();
        for k in 0..p.mean.len() {
            prop_assert_eq!(sa[k], a * p.mean[k]);
            prop_assert!((sab[k] - (sa[k] + sb[k])).abs() <= 1e-12 * (1.0 + sab[k].abs()));
        }
    }

    #[test]
    fn single_pair_mix_is_identity(pairs in pairs_strategy()) {
        prop_assert_eq!(mix(&pairs[..1], &[1.0]).unwrap(), pairs[0].mean.clone());
    }
}
