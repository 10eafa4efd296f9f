use proptest::prelude::*;
use vishape::sensitivity::{default_ts, fit_loglog, fit_slope};

proptest! {
    #[test]
    fn power_laws_are_recovered(c in 0.01..100.0_f64, p in 0.1..3.0_f64) {
        let ts = default_ts();
        let es: Vec<f64> = ts.iter().map(|t| c * t.powf(p)).collect();
        let (s, r) = fit_loglog(&ts, &es).unwrap();
        prop_assert!((s - p).abs() <= 1e-10 && r <= 1e-10);
    }

    #[test]
    fn slope_is_scale_invariant(es in prop::collection::vec(1e-6..1.0_f64, 7), c in 0.1..10.0_f64) {
        let ts = default_ts();
        let scaled: Vec<f64> = es.iter().map(|e| c * e).collect();
        let (a, b) = (fit_slope(&ts, &es).unwrap(), fit_slope(&ts, &scaled).unwrap());
        prop_assert!((a - b).abs() <= 1e-9);
    }
}

#[test]
fn too_few_points_give_no_slope() {
    assert_eq!(fit_slope(&[0.1], &[1.0]), None);
}
