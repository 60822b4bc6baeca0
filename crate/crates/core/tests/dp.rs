use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Laplace};

use selenc_core::dp::{self, budget_for_policy, compose, epsilon_of, expected_budgets, DpConfig, Policy};
use selenc_core::mask::{select_mask, EncryptionMask};

#[test]
fn laplace_noise_matches_the_distribution() {
    for b in [0.1, 1.0, 3.0] {
        let n = 20_000;
        let mut xs = dp::laplace_noise(b, n, 17).unwrap();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // sd of the mean is b*sqrt(2/n)
        assert!(mean.abs() < 5.0 * b * (2.0 / n as f64).sqrt(), "b={b} mean {mean}");
        assert!((var / (2.0 * b * b) - 1.0).abs() < 0.06, "b={b} var {var}");

        xs.sort_by(f64::total_cmp);
        let law = Laplace::new(0.0, b).unwrap();
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let f = law.cdf(*x);
                (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
            })
            .fold(0.0, f64::max);
        // 1.95 / sqrt(n) is the 0.1% critical value
        assert!(ks < 1.95 / (n as f64).sqrt(), "b={b} KS {ks}");
    }
}

#[test]
fn noise_is_seeded() {
    assert_eq!(dp::laplace_noise(1.0, 10, 3).unwrap(), dp::laplace_noise(1.0, 10, 3).unwrap());
    assert_ne!(dp::laplace_noise(1.0, 10, 3).unwrap(), dp::laplace_noise(1.0, 10, 4).unwrap());
}

#[test]
fn full_encryption_costs_exactly_zero() {
    let cfg = DpConfig::new(0.5, vec![0.3, 0.9, 0.1]).unwrap();
    let b = budget_for_policy(&cfg, &EncryptionMask::full(3), Policy::SelectiveP).unwrap();
    assert_eq!(b.epsilon, 0.0);
    assert!(b.epsilon.is_sign_positive());
    assert_eq!(b.policy, Policy::FullEncryption);
    let e = expected_budgets(100, 1.0, 1.0, 10, 0).unwrap();
    assert_eq!((e.random_mean, e.selective_mean), (0.0, 0.0));
}

#[test]
fn invalid_scales_are_rejected() {
    assert!(epsilon_of(1.0, 0.0).is_err());
    assert!(DpConfig::new(-1.0, vec![1.0]).is_err());
    assert!(expected_budgets(10, 1.0, 1.5, 10, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn budget_is_the_clear_sum(df in prop::collection::vec(0.0f64..2.0, 1..60), b in 0.05f64..5.0, p in 0.0f64..=1.0) {
        let cfg = DpConfig::new(b, df.clone()).unwrap();
        let mask = select_mask(&df, p).unwrap();
        let got = budget_for_policy(&cfg, &mask, Policy::SelectiveP).unwrap();
        let want: f64 = mask.complement_indices().map(|i| df[i] / b).sum();
        prop_assert!((got.epsilon - want).abs() <= 1e-12 * (1.0 + want));
        // never more than noising everything; selective never worse than any
        // other mask of the same size
        let all = budget_for_policy(&cfg, &EncryptionMask::empty(df.len()), Policy::AllNoise).unwrap();
        prop_assert!(got.epsilon <= all.epsilon + 1e-12);
        let other = EncryptionMask::from_indices(df.len(), &(0..mask.encrypted_count()).collect::<Vec<_>>(), p).unwrap();
        let o = budget_for_policy(&cfg, &other, Policy::RandomP).unwrap();
        prop_assert!(got.epsilon <= o.epsilon + 1e-12);
    }

    #[test]
    fn composition_adds(eps in prop::collection::vec(0.0f64..10.0, 0..20)) {
        let total = compose(&eps);
        prop_assert!((total - eps.iter().sum::<f64>()).abs() < 1e-9);
        prop_assert!(total >= 0.0 && total.is_sign_positive());
    }
}
