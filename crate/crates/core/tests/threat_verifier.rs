use diffshield::diffusion::{DiffusionKernel, GaussianMixture, NoiseSchedule};
use diffshield::exec::Exec;
use diffshield::seed;
use diffshield::threat::{self, AttackParams};
use diffshield::verifier::{self, Outcome, RateCache, CALIBRATED_STEPS};
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

#[test]
fn dataset_poison_rate_matches_fraction() {
    let gmm = GaussianMixture::default_model();
    let n = 100_000;
    let data =
        threat::build_pas_dataset(&gmm, n, 0.3, &AttackParams::default(), 11, Exec::Parallel)
            .unwrap();
    let rate = data.iter().filter(|s| s.is_poisoned).count() as f64 / n as f64;
    let se = (0.3f64 * 0.7 / n as f64).sqrt();
    assert!((rate - 0.3).abs() < 3.0 * se, "rate {rate}");
    for s in &data {
        assert_eq!(s.is_poisoned, s.true_label != s.claimed_label);
    }
}

#[test]
fn calibrated_attack_fools_the_raw_classifier() {
    let kernel = DiffusionKernel::default();
    let rate =
        verifier::attack_success_rate(&kernel, &AttackParams::default(), 10_000, 5, Exec::Parallel)
            .unwrap();
    assert!(rate > 0.9, "attack success {rate}");
}

#[test]
fn unpurified_detection_is_the_attack_failure_rate() {
    let kernel = DiffusionKernel::default();
    let est = verifier::estimate_rates(
        &kernel,
        &AttackParams::default(),
        0,
        10_000,
        3,
        Exec::Parallel,
    )
    .unwrap();
    assert!(est.detection_rate <= 0.1);
    let success =
        verifier::attack_success_rate(&kernel, &AttackParams::default(), 10_000, 3, Exec::Parallel)
            .unwrap();
    assert!((est.detection_rate - (1.0 - success)).abs() < 1e-12);
}

#[test]
fn raw_false_positive_rate_is_the_bayes_error() {
    let kernel = DiffusionKernel::new(GaussianMixture::symmetric_pair(), NoiseSchedule::default());
    let params = AttackParams {
        epsilon: 2.5,
        ..AttackParams::default()
    };
    let est = verifier::estimate_rates(&kernel, &params, 0, 20_000, 9, Exec::Parallel).unwrap();
    let bayes = Normal::standard().cdf(-1.0);
    assert!((bayes - 0.158_655_254).abs() < 1e-8);
    assert!(
        (est.false_positive_rate - bayes).abs() < 3.0 * est.false_positive_se,
        "f(0) = {} ± {}",
        est.false_positive_rate,
        est.false_positive_se
    );
}

#[test]
fn purification_helps_and_over_purification_hurts() {
    let mut cache = RateCache::new(DiffusionKernel::default(), AttackParams::default());
    let est = cache
        .curve(&[0, CALIBRATED_STEPS, 50], 4000, 21, Exec::Parallel)
        .unwrap();
    let (zero, mid, full) = (est[0], est[1], est[2]);
    let gain_se = (zero.detection_se.powi(2) + mid.detection_se.powi(2)).sqrt();
    assert!(mid.detection_rate - zero.detection_rate - 3.0 * gain_se >= 0.3);
    assert!(mid.false_positive_rate <= zero.false_positive_rate + 0.1);
    let drop_se = (full.detection_se.powi(2) + mid.detection_se.powi(2)).sqrt();
    assert!(mid.detection_rate - full.detection_rate > 3.0 * drop_se);
}

#[test]
fn crafted_sample_is_flagged_at_calibrated_steps() {
    let kernel = DiffusionKernel::default();
    let mut rng = seed::rng(77);
    let x = kernel.mixture.sample_component(0, &mut rng);
    let p = threat::craft_poison(&kernel.mixture, &x, 0, 1, &AttackParams::default()).unwrap();
    assert_eq!(
        verifier::verify(&p, 0, &kernel, &mut rng).unwrap().outcome,
        Outcome::Pass
    );
    let flags = (0..10_000u64)
        .filter(|&i| {
            verifier::verify(&p, CALIBRATED_STEPS, &kernel, &mut seed::rng(i))
                .unwrap()
                .outcome
                == Outcome::Flag
        })
        .count();
    assert!(flags > 5_000, "{flags} flags");
}

#[test]
fn rate_estimates_ignore_execution_mode() {
    let kernel = DiffusionKernel::default();
    let t = AttackParams::default();
    let a = verifier::estimate_curve(&kernel, &t, &[0, 3, 7], 300, 2, Exec::Parallel).unwrap();
    let b = verifier::estimate_curve(&kernel, &t, &[0, 3, 7], 300, 2, Exec::Sequential).unwrap();
    assert_eq!(a, b);
    for e in &a {
        let se = (e.detection_rate * (1.0 - e.detection_rate) / 300.0).sqrt();
        assert_eq!(e.detection_se, se);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn crafted_samples_stay_in_the_ball(s in any::<u64>(), eps in 0.0f64..12.0, target in 0usize..2) {
        let gmm = GaussianMixture::default_model();
        let mut rng = seed::rng(s);
        let true_label = 1 - target;
        let x = gmm.sample_component(true_label, &mut rng);
        let params = AttackParams { epsilon: eps, ..AttackParams::default() };
        let p = threat::craft_poison(&gmm, &x, true_label, target, &params).unwrap();
        prop_assert!(p.x.distance(&x) <= eps + 1e-9);
        prop_assert!(p.is_poisoned && p.true_label != p.claimed_label);
    }

    #[test]
    fn zero_budget_never_changes_the_label(s in any::<u64>()) {
        let gmm = GaussianMixture::symmetric_pair();
        let mut rng = seed::rng(s);
        let (label, x) = gmm.sample(&mut rng);
        let params = AttackParams { epsilon: 0.0, ..AttackParams::default() };
        let p = threat::craft_poison(&gmm, &x, label, 1 - label, &params).unwrap();
        prop_assert_eq!(gmm.classify(&p.x).unwrap(), gmm.classify(&x).unwrap());
    }

    #[test]
    fn verify_flags_iff_label_differs(s in any::<u64>(), steps in 0usize..=50) {
        let kernel = DiffusionKernel::default();
        let mut rng = seed::rng(s);
        let sample = threat::draw_fetch(&kernel.mixture, 0.5, &AttackParams::default(), &mut rng).unwrap();
        let d = verifier::verify(&sample, steps, &kernel, &mut seed::rng(s)).unwrap();
        let label = kernel.mixture.classify(&d.purified).unwrap();
        prop_assert_eq!(d.outcome == Outcome::Flag, label != sample.claimed_label);
        prop_assert_eq!(d.steps_used, steps);
        let again = verifier::verify(&sample, steps, &kernel, &mut seed::rng(s)).unwrap();
        prop_assert_eq!(d, again);
    }

    #[test]
    fn datasets_are_seed_deterministic(s in any::<u64>()) {
        let gmm = GaussianMixture::default_model();
        let a = threat::build_pas_dataset(&gmm, 20, 0.3, &AttackParams::default(), s, Exec::Parallel).unwrap();
        let b = threat::build_pas_dataset(&gmm, 20, 0.3, &AttackParams::default(), s, Exec::Parallel).unwrap();
        prop_assert_eq!(a, b);
    }
}
