//! Student-t distribution with real-valued degrees of freedom.

use crate::error::{Result, RveError};

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`; `y` must equal `1 - x` and is
/// passed separately to keep precision near `x = 1`.
fn reg_inc_beta(a: f64, b: f64, x: f64, y: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if y <= 0.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * y.ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, y) / b
    }
}

fn check_df(df: f64) -> Result<()> {
    if df > 0.0 && df.is_finite() {
        Ok(())
    } else {
        Err(RveError::InvalidDf(df))
    }
}

/// `P(T > |x|)`, computed without cancellation.
fn upper_tail_abs(x: f64, df: f64) -> f64 {
    let x2 = x * x;
    let denom = df + x2;
    0.5 * reg_inc_beta(df / 2.0, 0.5, df / denom, x2 / denom)
}

/// `P(T <= x)` for `T ~ t(df)`.
pub fn t_cdf(x: f64, df: f64) -> Result<f64> {
    check_df(df)?;
    if x == 0.0 {
        return Ok(0.5);
    }
    let tail = upper_tail_abs(x, df);
    Ok(if x > 0.0 { 1.0 - tail } else { tail })
}

/// `P(T > x)`.
pub fn t_sf(x: f64, df: f64) -> Result<f64> {
    t_cdf(-x, df)
}

/// Two-sided p-value `P(|T| > |t|)`; symmetric in `t` by construction.
pub fn two_sided_p(t: f64, df: f64) -> Result<f64> {
    check_df(df)?;
    if t.is_nan() {
        return Ok(f64::NAN);
    }
    Ok((2.0 * upper_tail_abs(t.abs(), df)).min(1.0))
}

/// Inverse CDF by bracketed bisection on the upper tail.
pub fn t_quantile(p: f64, df: f64) -> Result<f64> {
    check_df(df)?;
    if !(p > 0.0 && p < 1.0) {
        return Err(RveError::InvalidProbability(p));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    let tail = p.min(1.0 - p);
    let mut lo = 0.0;
    let mut hi = 1.0;
    while upper_tail_abs(hi, df) > tail {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            break;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if upper_tail_abs(mid, df) > tail {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = 0.5 * (lo + hi);
    Ok(if p > 0.5 { t } else { -t })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_values() {
        assert_eq!(t_cdf(0.0, 3.7).unwrap(), 0.5);
        assert!((t_cdf(1.0, 1.0).unwrap() - 0.75).abs() < 1e-14);
        assert_eq!(t_quantile(0.5, 4.0).unwrap(), 0.0);
        assert!((t_quantile(0.75, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_arguments() {
        assert!(matches!(t_cdf(1.0, 0.0), Err(RveError::InvalidDf(_))));
        assert!(matches!(t_cdf(1.0, f64::NAN), Err(RveError::InvalidDf(_))));
        assert!(matches!(t_quantile(1.0, 3.0), Err(RveError::InvalidProbability(_))));
        assert!(matches!(t_quantile(0.3, -1.0), Err(RveError::InvalidDf(_))));
    }

    #[test]
    fn ln_gamma_small_integers() {
        let mut fact = 1.0f64;
        for n in 1..20 {
            assert!((ln_gamma(n as f64) - fact.ln()).abs() < 1e-12, "{n}");
            fact *= n as f64;
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
    }

    #[test]
    fn symmetric_two_sided() {
        for &t in &[0.3, 1.53, 4.0, 12.0] {
            assert_eq!(two_sided_p(t, 6.2).unwrap(), two_sided_p(-t, 6.2).unwrap());
        }
    }
}
