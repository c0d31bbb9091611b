use lapp::masking::{binarize_ste, importance_l1, soft_mask, MaskBundle};
use ndarray::{Array1, Array4};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn hard_mask_is_importance_at_least_threshold(
        imp in prop::collection::vec(0.0f64..50.0, 1..8),
        delta in -5.0f64..55.0,
        pick in any::<prop::sample::Index>(),
    ) {
        // Also exercise the tie and the nearest neighbours of the threshold.
        let mut imp = imp;
        let i = pick.index(imp.len());
        match i % 3 {
            0 => imp[i] = delta,
            1 => imp[i] = delta.next_down(),
            _ => imp[i] = delta.next_up(),
        }
        let imp = Array1::from(imp);
        let hard = binarize_ste(&soft_mask(&imp, delta));
        for (m, &v) in hard.iter().zip(imp.iter()) {
            prop_assert_eq!(*m == 1.0, v >= delta, "I={} delta={}", v, delta);
        }
    }

    #[test]
    fn single_precision_agrees_too(
        imp in prop::collection::vec(0.0f32..20.0, 1..8),
        delta in 0.0f32..20.0,
    ) {
        let imp = Array1::from(imp);
        let hard = binarize_ste(&soft_mask(&imp, delta));
        for (m, &v) in hard.iter().zip(imp.iter()) {
            prop_assert_eq!(*m == 1.0, v >= delta);
        }
    }
}

#[test]
fn tie_keeps_the_filter() {
    for d in [0.0, 1e-300, 0.5, 3.25, 1e6] {
        let imp = Array1::from(vec![d]);
        assert_eq!(binarize_ste(&soft_mask(&imp, d))[0], 1.0);
    }
}

#[test]
fn bundle_counts_and_importances() {
    let w = Array4::from_shape_fn((3, 2, 1, 1), |(o, i, _, _)| if o == 1 { -(i as f64) - 1.0 } else { 0.25 });
    let imp = importance_l1(w.view()).unwrap();
    assert_eq!(imp.to_vec(), vec![0.5, 3.0, 0.5]);
    let b = MaskBundle::compute(w.view(), 0.5).unwrap();
    assert_eq!(b.kept_count, 3);
    let b = MaskBundle::compute(w.view(), 0.6).unwrap();
    assert_eq!(b.hard_bits(), vec![false, true, false]);
    assert!((b.pruning_rate() - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn non_finite_weights_are_a_domain_error() {
    let mut w = Array4::<f64>::zeros((2, 1, 1, 1));
    w[[1, 0, 0, 0]] = f64::NAN;
    assert!(importance_l1(w.view()).is_err());
}
