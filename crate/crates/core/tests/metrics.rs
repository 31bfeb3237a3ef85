use avfusion::metrics::{ccc, ccc_loss, ccc_masked};
use proptest::prelude::*;

fn zero_mean(v: Vec<f64>) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.into_iter().map(|x| x - m).collect()
}

fn population_variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

fn non_constant() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 3..200).prop_filter("non-constant", |v| population_variance(v) > 1e-6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn self_agreement_is_one(y in non_constant()) {
        let c = ccc(&y, &y).unwrap();
        prop_assert!((c.value - 1.0).abs() <= 1e-12);
        prop_assert!(!c.degenerate);
    }

    #[test]
    fn negation_of_zero_mean_is_minus_one(y in non_constant()) {
        let y = zero_mean(y);
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        prop_assert!((ccc(&y, &neg).unwrap().value + 1.0).abs() <= 1e-12);
    }

    #[test]
    fn shift_matches_closed_form(y in non_constant(), c_ix in 0usize..3) {
        let c = [0.1, 0.5, 1.0][c_ix];
        let shifted: Vec<f64> = y.iter().map(|v| v + c).collect();
        let s2 = population_variance(&y);
        let expected = 2.0 * s2 / (2.0 * s2 + c * c);
        prop_assert!((ccc(&shifted, &y).unwrap().value - expected).abs() <= 1e-10);
    }

    #[test]
    fn value_is_bounded_and_symmetric(p in non_constant(), seed in any::<u64>()) {
        let t: Vec<f64> = p.iter().enumerate().map(|(i, v)| (v * 3.1 + i as f64 * 0.37 + seed as f64 * 1e-3).sin()).collect();
        let a = ccc(&p, &t).unwrap().value;
        prop_assert!((-1.0..=1.0).contains(&a));
        prop_assert!((a - ccc(&t, &p).unwrap().value).abs() <= 1e-12);
        let loss = ccc_loss(&[(&p, &t)]).unwrap().value;
        prop_assert!((loss - (1.0 - a)).abs() <= 1e-12);
    }

    #[test]
    fn masked_frames_are_ignored(y in non_constant(), junk in -5.0f64..5.0) {
        let mut p = y.clone();
        p[0] = junk;
        let mut mask = vec![true; y.len()];
        mask[0] = false;
        let masked = ccc_masked(&p, &y, Some(&mask)).unwrap();
        let direct = ccc(&p[1..], &y[1..]);
        if let Ok(d) = direct {
            prop_assert_eq!(masked.degenerate, d.degenerate);
            if !d.degenerate {
                prop_assert!((masked.value - d.value).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn constant_inputs_are_flagged_not_fatal() {
    let c = ccc(&[0.3; 5], &[0.3; 5]).unwrap();
    assert!(c.degenerate);
    assert_eq!(c.value, 0.0);
    assert!(ccc(&[1.0, 2.0], &[1.0]).is_err());
}
