//! Student-t CDF and quantiles against 30-digit mpmath values and statrs.

use proptest::prelude::*;
use rve_core::{t_cdf, t_quantile, two_sided_p};
use statrs::distribution::{ContinuousCDF, StudentsT};

const MPMATH_CDF: [(f64, f64, f64); 10] = [
    (0.5, 1.0, 0.647_583_617_650_433_3),
    (1.53, 7.84, 0.917_345_384_466_059_2),
    (-2.0, 3.5, 0.063_069_261_287_956_77),
    (10.0, 2.5, 0.997_779_252_116_346_3),
    (-50.0, 1.0, 0.006_365_349_100_972_797),
    (3.2, 1000.0, 0.999_291_230_847_841_2),
    (0.1, 250.25, 0.539_787_805_363_643_9),
    (-1.044, 6.07, 0.168_134_285_132_564_55),
    (5.766, 4.33, 0.998_245_890_212_147_7),
    (40.0, 30.0, 1.0),
];

#[test]
fn cdf_matches_mpmath() {
    for (x, df, want) in MPMATH_CDF {
        let got = t_cdf(x, df).unwrap();
        assert!((got - want).abs() <= 1e-12, "t_cdf({x}, {df}) = {got}, want {want}");
    }
}

#[test]
fn rounded_inputs_two_sided() {
    // p for the rounded pair (t = 1.53, df = 7.84)
    let p = two_sided_p(1.53, 7.84).unwrap();
    assert!((p - 2.0 * (1.0 - 0.917_345_384_466_059_2)).abs() < 1e-12);
}

#[test]
fn quantiles_match_mpmath() {
    for (p, df, want) in [
        (0.975, 7.84, 2.314_221_528_385_592_3),
        (0.975, 1.3, 7.500_529_325_562_028),
        (0.995, 4.33, 4.373_080_422_825_935),
    ] {
        let got = t_quantile(p, df).unwrap();
        assert!((got - want).abs() <= 1e-9 * want, "q({p}, {df}) = {got}, want {want}");
    }
}

#[test]
fn cdf_matches_statrs_on_grid() {
    for &df in &[1.0, 1.3, 2.0, 4.33, 7.84, 15.5, 60.0, 250.0, 1000.0] {
        let dist = StudentsT::new(0.0, 1.0, df).unwrap();
        let mut x = -50.0;
        while x <= 50.0 {
            let got = t_cdf(x, df).unwrap();
            let want = dist.cdf(x);
            assert!((got - want).abs() <= 1e-10, "x {x} df {df}: {got} vs {want}");
            x += 0.37;
        }
    }
}

proptest! {
    #[test]
    fn quantile_inverts_cdf(p in 0.0005f64..0.9995, df in 1.0f64..1000.0) {
        let t = t_quantile(p, df).unwrap();
        prop_assert!((t_cdf(t, df).unwrap() - p).abs() <= 1e-9);
    }

    #[test]
    fn two_sided_is_even(t in -50.0f64..50.0, df in 1.0f64..1000.0) {
        prop_assert_eq!(two_sided_p(t, df).unwrap(), two_sided_p(-t, df).unwrap());
    }

    #[test]
    fn cdf_is_monotone(x in -50.0f64..50.0, dx in 0.0f64..5.0, df in 1.0f64..1000.0) {
        prop_assert!(t_cdf(x, df).unwrap() <= t_cdf(x + dx, df).unwrap() + 1e-15);
    }
}
