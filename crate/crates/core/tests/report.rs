use std::path::PathBuf;

use rve_core::{fit_model, format_fit, format_sensitivity, parse_csv, parse_formula, sensitivity, CsvSchema, Dataset, ModelSpec, WeightModel};

fn synth() -> Dataset {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "tests", "data", "synth.csv"].iter().collect();
    parse_csv(std::fs::File::open(path).unwrap(), &CsvSchema::new().user_weight("uw")).unwrap()
}

fn spec(formula: &str, model: WeightModel) -> ModelSpec {
    ModelSpec::new(parse_formula(formula).unwrap(), model)
}

/// Printed numbers must agree with the fit to the precision they display.
fn close_to_printed(printed: &str, value: f64) -> bool {
    let decimals = printed.split('.').nth(1).map_or(0, |d| d.len()) as i32;
    let parsed: f64 = printed.parse().unwrap();
    (parsed - value).abs() <= 0.5 * 10f64.powi(-decimals) + 1e-12
}

#[test]
fn coefficient_rows_match_fit() {
    for model in [WeightModel::Corr, WeightModel::Hier, WeightModel::User] {
        let fit = fit_model(&synth(), &spec("es ~ x + g", model)).unwrap();
        let text = format_fit(&fit);
        for c in &fit.coefficients {
            let row = text.lines().find(|l| l.split_whitespace().next() == Some(c.name.as_str())).unwrap();
            let cells: Vec<&str> = row.split_whitespace().collect();
            let values = [c.estimate, c.std_err, c.t_value, c.df, c.p_value, c.ci_lower, c.ci_upper];
            for (cell, v) in cells[1..8].iter().zip(values) {
                assert!(close_to_printed(cell, v), "{model:?} {}: {cell} vs {v}", c.name);
            }
            assert_eq!(cells[4], format!("{:.2}", c.df));
            assert_eq!(cells.get(8).copied().unwrap_or(""), c.sig_code);
        }
    }
}

#[test]
fn header_lines_per_model() {
    let corr = format_fit(&fit_model(&synth(), &spec("es ~ x", WeightModel::Corr).rho(0.5)).unwrap());
    assert!(corr.contains("\nRho = 0.5\n"));
    assert!(corr.contains("\nI.sq = "));
    assert!(!corr.contains("Omega.sq"));

    let hier = format_fit(&fit_model(&synth(), &spec("es ~ x", WeightModel::Hier).small(false)).unwrap());
    assert!(hier.starts_with("RVE: Hierarchical Effects Model without Small-Sample Corrections\n"));
    let omega = hier.lines().position(|l| l.starts_with("Omega.sq = ")).unwrap();
    assert!(hier.lines().nth(omega + 1).unwrap().starts_with("Tau.Sq = "));

    let user = format_fit(&fit_model(&synth(), &spec("es ~ x", WeightModel::User)).unwrap());
    assert!(user.starts_with("RVE: User-Weighted Effects Model with Small-Sample Corrections\n"));
    assert!(!user.contains("Tau.Sq"));
}

#[test]
fn tau_sq_printed_to_seven_digits() {
    let fit = fit_model(&synth(), &spec("es ~ x + g", WeightModel::Corr)).unwrap();
    let text = format_fit(&fit);
    let line = text.lines().find(|l| l.starts_with("Tau.Sq = ")).unwrap();
    let printed = &line["Tau.Sq = ".len()..];
    let tau = fit.components.unwrap().tau_sq;
    let digits = printed.chars().filter(char::is_ascii_digit).collect::<String>().trim_start_matches('0').len();
    assert!(digits <= 7);
    assert!((printed.parse::<f64>().unwrap() - tau).abs() / tau < 5e-7);
}

#[test]
fn sensitivity_layout() {
    let table = sensitivity(&synth(), &spec("es ~ x", WeightModel::Corr)).unwrap();
    let text = format_sensitivity(&table);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 2 * 2 + 1);
    let tau_cells: Vec<&str> = lines[5].split_whitespace().skip(1).collect();
    for (cell, tau) in tau_cells.iter().zip(&table.tau_sq) {
        assert_eq!(*cell, format!("{tau:.3}"));
    }
    for k in 0..2 {
        assert!(table.estimates[k].windows(2).all(|w| w[0].is_finite() && w[1].is_finite()));
    }
}

#[test]
fn sensitivity_constant_for_singletons() {
    let text = "study,es,v\n1,0.1,0.04\n2,0.5,0.05\n3,0.3,0.02\n4,-0.2,0.06\n5,0.4,0.03\n";
    let ds = parse_csv(text.as_bytes(), &CsvSchema::new()).unwrap();
    let table = sensitivity(&ds, &spec("es ~ 1", WeightModel::Corr)).unwrap();
    for row in table.estimates.iter().chain(&table.std_errs).chain(std::iter::once(&table.tau_sq)) {
        assert!(row.iter().all(|x| (x - row[0]).abs() < 1e-14), "{row:?}");
    }
}
