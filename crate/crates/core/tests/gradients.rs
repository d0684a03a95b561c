mod common;

use adt_rec::model::ModelKind;
use common::{gradient_relative_error, random_problem, straddles_kink};
use proptest::prelude::*;

const TOLERANCE: f64 = 1e-4;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn gmf_gradient_matches_finite_differences(seed in any::<u64>()) {
        let (m, b, w) = random_problem(ModelKind::Gmf, seed);
        let err = gradient_relative_error(&m, &b, &w, seed);
        prop_assert!(err <= TOLERANCE, "relative error {err:e}");
    }

    #[test]
    fn neumf_gradient_matches_finite_differences(seed in any::<u64>()) {
        let (m, b, w) = random_problem(ModelKind::NeuMf, seed);
        prop_assume!(!straddles_kink(&m, &b, &w, seed));
        let err = gradient_relative_error(&m, &b, &w, seed);
        prop_assert!(err <= TOLERANCE, "relative error {err:e}");
    }

    #[test]
    fn cdae_gradient_matches_finite_differences(seed in any::<u64>()) {
        let (m, b, w) = random_problem(ModelKind::Cdae, seed);
        prop_assume!(!straddles_kink(&m, &b, &w, seed));
        let err = gradient_relative_error(&m, &b, &w, seed);
        prop_assert!(err <= TOLERANCE, "relative error {err:e}");
    }

    #[test]
    fn gradient_is_additive_over_examples(seed in any::<u64>()) {
        let (m, b, w) = random_problem(ModelKind::NeuMf, seed);
        let rng = adt_rec::rng::stream(seed, 0);
        let full = m.backprop_batch(&b, &w, &mut rng.clone()).unwrap();
        let mut sum = full.zeros_like();
        for k in 0..b.len() {
            let mut only = vec![0.0; b.len()];
            only[k] = w[k];
            let g = m.backprop_batch(&b, &only, &mut rng.clone()).unwrap();
            for (s, x) in sum.blocks.iter_mut().zip(&g.blocks) {
                s.data.iter_mut().zip(&x.data).for_each(|(a, c)| *a += c);
            }
        }
        prop_assert!(full.max_abs_diff(&sum) < 1e-12);
    }
}

/// Draws whose finite-difference step crosses a ReLU kink. A much smaller
/// step no longer crosses it and agrees with the analytic gradient.
#[test]
fn kink_draws_agree_at_a_smaller_step() {
    let cases = [
        (ModelKind::NeuMf, 666383905886732812),
        (ModelKind::NeuMf, 5808334058905327339),
        (ModelKind::Cdae, 16415302785249996277),
    ];
    for (kind, seed) in cases {
        let (m, b, w) = random_problem(kind, seed);
        assert!(straddles_kink(&m, &b, &w, seed));
        assert!(gradient_relative_error(&m, &b, &w, seed) > 1e-4);
        let rng = adt_rec::rng::stream(seed, 2000);
        let analytic: Vec<f64> = m.backprop_batch(&b, &w, &mut rng.clone()).unwrap().values().collect();
        let fine = common::numeric_gradient(&m, &b, &w, &rng, 1e-7);
        let num: f64 = analytic.iter().zip(&fine).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let den: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(num / den < 1e-6, "{kind:?} {seed}: {:.1e}", num / den);
    }
}

#[test]
fn gmf_draws_are_never_flagged() {
    for seed in 0..50 {
        let (m, b, w) = random_problem(ModelKind::Gmf, seed);
        assert!(!straddles_kink(&m, &b, &w, seed));
    }
}

#[test]
fn saturated_predictions_keep_a_finite_gradient() {
    let (mut m, b, w) = random_problem(ModelKind::Gmf, 3);
    m.params_mut().scale(40.0);
    let g = m.backprop_batch(&b, &w, &mut adt_rec::rng::stream(0, 0)).unwrap();
    assert!(g.check_finite().is_ok());
    let loss = m.batch_loss(&b, &w, &mut adt_rec::rng::stream(0, 0)).unwrap();
    assert!(loss.is_finite());
}
