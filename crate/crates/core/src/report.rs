//! Plain-text rendering of fit results and sensitivity tables.

use std::fmt::Write;

use crate::inference::{FitResult, SensitivityTable};
use crate::weights::WeightModel;

/// Significant digits and decimal exponent of `|x|` rounded to `digits`
/// significant digits, trailing zeros dropped.
fn sig_and_exponent(x: f64, digits: usize) -> (usize, i32) {
    if x == 0.0 {
        return (1, 0);
    }
    let alpha = x.abs();
    let mut kp = alpha.log10().floor() as i32;
    let scale = 10f64.powi(digits as i32 - 1 - kp);
    let mut mant = (alpha * scale).round() as u64;
    let top = 10u64.pow(digits as u32);
    if mant >= top {
        mant /= 10;
        kp += 1;
    } else if mant < top / 10 {
        kp -= 1;
        mant = (alpha * scale * 10.0).round() as u64;
    }
    let mut nsig = digits;
    while nsig > 1 && mant.is_multiple_of(10) {
        mant /= 10;
        nsig -= 1;
    }
    (nsig, kp)
}

fn special(x: f64) -> Option<String> {
    if x.is_nan() {
        Some("NaN".into())
    } else if x.is_infinite() {
        Some(if x > 0.0 { "Inf" } else { "-Inf" }.into())
    } else {
        None
    }
}

/// Formats a column with a common number of decimals chosen so every entry
/// shows at least `digits` significant digits (trailing zeros aside).
/// Falls back to scientific notation when that is narrower.
pub fn format_column(values: &[f64], digits: usize) -> Vec<String> {
    let finite: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if finite.is_empty() {
        return values.iter().map(|&x| special(x).unwrap_or_default()).collect();
    }
    let neg = finite.iter().any(|&x| x < 0.0) as i32;
    let mut rgt = 0i32;
    let mut left = 1i32;
    let mut max_sig = 1usize;
    let mut max_exp = 0i32;
    for &x in &finite {
        let (nsig, kp) = sig_and_exponent(x, digits);
        rgt = rgt.max(nsig as i32 - kp - 1);
        left = left.max(kp + 1);
        max_sig = max_sig.max(nsig);
        max_exp = max_exp.max(kp.abs());
    }
    let rgt = rgt.clamp(0, 15) as usize;
    let fixed_width = neg + left + if rgt > 0 { rgt as i32 + 1 } else { 0 };
    let exp_width = if max_exp >= 100 { 5 } else { 4 };
    let sci_width = neg + if max_sig > 1 { max_sig as i32 + 1 } else { 1 } + exp_width;
    values
        .iter()
        .map(|&x| {
            special(x).unwrap_or_else(|| {
                if fixed_width <= sci_width {
                    format!("{x:.rgt$}")
                } else {
                    r_scientific(x, max_sig - 1)
                }
            })
        })
        .collect()
}

fn r_scientific(x: f64, decimals: usize) -> String {
    let s = format!("{x:.decimals$e}");
    let (mant, exp) = s.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mant}e{sign}{:02}", exp.abs())
}

/// A single value with up to `digits` significant digits.
pub fn format_sig(x: f64, digits: usize) -> String {
    format_column(&[x], digits).remove(0)
}

fn model_title(model: WeightModel) -> &'static str {
    match model {
        WeightModel::Corr => "Correlated",
        WeightModel::Hier => "Hierarchical",
        WeightModel::User => "User-Weighted",
    }
}

/// Lays out rows of cells; the first column is left-aligned, `left_last`
/// also left-aligns the final column.
fn table(rows: &[Vec<String>], left_last: bool) -> String {
    let ncol = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..ncol)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let mut line = String::new();
        for (c, cell) in row.iter().enumerate() {
            if c > 0 {
                line.push(' ');
            }
            let w = widths[c];
            if c == 0 || (left_last && c == ncol - 1) {
                let _ = write!(line, "{cell:<w$}");
            } else {
                let _ = write!(line, "{cell:>w$}");
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

/// The fit report printed by `rve fit`.
pub fn format_fit(fit: &FitResult) -> String {
    let meta = &fit.meta;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "RVE: {} Effects Model with{} Small-Sample Corrections",
        model_title(meta.model),
        if meta.small { "" } else { "out" }
    );
    out.push('\n');
    let _ = writeln!(out, "Model: {}", meta.formula);
    out.push('\n');
    let unit = if meta.model == WeightModel::Hier { "clusters" } else { "studies" };
    let _ = writeln!(out, "Number of {unit} = {}", meta.m);
    let _ = writeln!(
        out,
        "Number of outcomes = {} (min = {}, mean = {}, median = {}, max = {})",
        meta.n,
        meta.k_min,
        format_sig(meta.k_mean, 3),
        format_sig(meta.k_median, 3),
        meta.k_max
    );
    if let Some(vc) = &fit.components {
        match meta.model {
            WeightModel::Corr => {
                if let Some(rho) = meta.rho {
                    let _ = writeln!(out, "Rho = {}", format_sig(rho, 7));
                }
                if let Some(i_sq) = fit.i_sq {
                    let _ = writeln!(out, "I.sq = {}", format_sig(i_sq, 7));
                }
                let _ = writeln!(out, "Tau.Sq = {}", format_sig(vc.tau_sq, 7));
            }
            WeightModel::Hier => {
                let _ = writeln!(out, "Omega.sq = {}", format_sig(vc.omega_sq.unwrap_or(0.0), 7));
                let _ = writeln!(out, "Tau.Sq = {}", format_sig(vc.tau_sq, 7));
            }
            WeightModel::User => {}
        }
    }
    out.push('\n');

    let coefs = &fit.coefficients;
    let col = |f: fn(&crate::inference::CoefficientReport) -> f64| {
        format_column(&coefs.iter().map(f).collect::<Vec<_>>(), 3)
    };
    let est = col(|c| c.estimate);
    let se = col(|c| c.std_err);
    let t = col(|c| c.t_value);
    let p = col(|c| c.p_value);
    let lo = col(|c| c.ci_lower);
    let hi = col(|c| c.ci_upper);
    let mut rows = vec![["", "Estimate", "StdErr", "t-value", "df", "P(|t|>)", "CI.L", "CI.U", "Sig"]
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()];
    for (i, c) in coefs.iter().enumerate() {
        rows.push(vec![
            c.name.clone(),
            est[i].clone(),
            se[i].clone(),
            t[i].clone(),
            special(c.df).unwrap_or_else(|| format!("{:.2}", c.df)),
            p[i].clone(),
            lo[i].clone(),
            hi[i].clone(),
            c.sig_code.to_string(),
        ]);
    }
    out.push_str(&table(&rows, true));
    out.push_str("---\n");
    out.push_str("Signif. codes: < .01 *** < .05 ** < .10 *\n");
    out.push_str("---\n");
    out.push_str("Note: If df < 4, do not trust the results\n");
    out
}

/// The ρ-sensitivity table printed by `rve sensitivity`.
pub fn format_sensitivity(table_data: &SensitivityTable) -> String {
    let mut rows = Vec::new();
    let mut header = vec![String::new(), String::new()];
    header.extend(table_data.rhos.iter().map(|r| format!("rho={}", format_sig(*r, 7))));
    rows.push(header);
    let three = |xs: &[f64]| xs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>();
    for (label, block) in [("Estimate", &table_data.estimates), ("Std.Err", &table_data.std_errs)] {
        for (name, values) in table_data.coef_names.iter().zip(block.iter()) {
            let mut row = vec![label.to_string(), name.clone()];
            row.extend(three(values));
            rows.push(row);
        }
    }
    let mut tau = vec!["Tau.Sq".to_string(), String::new()];
    tau.extend(three(&table_data.tau_sq));
    rows.push(tau);
    table(&rows, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn column_decimals_follow_smallest_entry() {
        let col = format_column(&[-0.154226, -0.000162, 0.003467, 0.666645], 3);
        assert_eq!(col, ["-0.154226", "-0.000162", "0.003467", "0.666645"]);
    }

    #[test]
    fn single_values() {
        assert_eq!(format_sig(0.2769, 3), "0.277");
        assert_eq!(format_sig(1.5312, 3), "1.53");
        assert_eq!(format_sig(-0.14105, 3), "-0.141");
        assert_eq!(format_sig(0.18498123, 7), "0.1849812");
        assert_eq!(format_sig(82.052724, 7), "82.05272");
        assert_eq!(format_sig(0.8, 7), "0.8");
        assert_eq!(format_sig(0.0, 7), "0");
        assert_eq!(format_sig(3.5555, 3), "3.56");
        assert_eq!(format_sig(2.0, 3), "2");
        assert_eq!(format_sig(9.9996, 3), "10");
    }

    #[test]
    fn p_value_column() {
        assert_eq!(format_column(&[0.33612, 0.0035], 3), ["0.3361", "0.0035"]);
    }

    #[test]
    fn tiny_values_go_scientific() {
        let col = format_column(&[0.5, 1.2e-12], 3);
        assert_eq!(col, ["5.0e-01", "1.2e-12"]);
    }

    #[test]
    fn specials() {
        assert_eq!(format_column(&[f64::NAN, 1.0], 3), ["NaN", "1"]);
    }

    #[test]
    fn table_alignment() {
        let rows = vec![
            vec!["".to_string(), "a".to_string(), "Sig".to_string()],
            vec!["long".to_string(), "12.5".to_string(), "***".to_string()],
            vec!["x".to_string(), "1".to_string(), "".to_string()],
        ];
        assert_eq!(table(&rows, true), "        a Sig\nlong 12.5 ***\nx       1\n");
    }
}
