//! Forest plot layout and SVG rendering.

use std::fmt::Write;

use crate::data::Dataset;
use crate::error::{Result, RveError};
use crate::inference::{fit_model, FitResult, ModelSpec};

/// Normal quantile used for per-effect intervals.
const Z975: f64 = 1.959_963_984_540_054;

/// Extra column names that display computed values rather than data columns.
pub const EFFECT_SIZE_COLUMN: &str = "Effect Size";
pub const WEIGHT_COLUMN: &str = "Weight";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForestOptions {
    /// Column holding study labels; defaults to the study identifier.
    pub study_label: Option<String>,
    /// Column holding effect-size labels; defaults to the row position within the study.
    pub es_label: Option<String>,
    pub extra_columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestRow {
    pub label: String,
    pub estimate: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub weight: f64,
    /// Box area relative to the heaviest effect size, in `[0, 1]`.
    pub box_area: f64,
    pub extras: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestGroup {
    pub study: String,
    pub rows: Vec<ForestRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestSummary {
    pub estimate: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestLayout {
    pub groups: Vec<ForestGroup>,
    pub summary: ForestSummary,
    pub extra_columns: Vec<String>,
}

impl ForestLayout {
    pub fn row_count(&self) -> usize {
        self.groups.iter().map(|g| g.rows.len()).sum()
    }
}

fn text_column(ds: &Dataset, name: &str) -> Result<Vec<String>> {
    if ds.column(name).is_none() {
        return Err(RveError::MissingLabelColumn(name.to_string()));
    }
    Ok(ds.values(name)?.iter().map(|v| v.to_text()).collect())
}

/// Builds the layout from per-row final weights and the pooled interval.
pub fn forest_layout(ds: &Dataset, weights: &[f64], summary: ForestSummary, opts: &ForestOptions) -> Result<ForestLayout> {
    let study_labels = match &opts.study_label {
        Some(c) => Some(text_column(ds, c)?),
        None => None,
    };
    let es_labels = match &opts.es_label {
        Some(c) => Some(text_column(ds, c)?),
        None => None,
    };
    let extras: Vec<Option<Vec<String>>> = opts
        .extra_columns
        .iter()
        .map(|c| match c.as_str() {
            EFFECT_SIZE_COLUMN | WEIGHT_COLUMN => Ok(None),
            other => text_column(ds, other).map(Some),
        })
        .collect::<Result<_>>()?;

    let max_w = weights.iter().copied().fold(0.0f64, f64::max);
    let rows = ds.rows();
    let groups = ds
        .study_groups()
        .into_iter()
        .map(|(study, idx)| {
            let study = match &study_labels {
                Some(l) => l[idx[0]].clone(),
                None => study,
            };
            let rows = idx
                .iter()
                .enumerate()
                .map(|(pos, &r)| {
                    let row = &rows[r];
                    let half = Z975 * row.var_eff_size.sqrt();
                    let weight = weights[r];
                    ForestRow {
                        label: es_labels.as_ref().map_or_else(|| (pos + 1).to_string(), |l| l[r].clone()),
                        estimate: row.effect_size,
                        ci_lower: row.effect_size - half,
                        ci_upper: row.effect_size + half,
                        weight,
                        box_area: if max_w > 0.0 { (weight / max_w).max(0.0) } else { 0.0 },
                        extras: opts
                            .extra_columns
                            .iter()
                            .zip(&extras)
                            .map(|(name, values)| match values {
                                Some(v) => v[r].clone(),
                                None if name == EFFECT_SIZE_COLUMN => format!("{:.2}", row.effect_size),
                                None => format!("{weight:.2}"),
                            })
                            .collect(),
                    }
                })
                .collect();
            ForestGroup { study, rows }
        })
        .collect();

    Ok(ForestLayout {
        groups,
        summary,
        extra_columns: opts.extra_columns.clone(),
    })
}

/// Pooled summary from a fitted model: the intercept (or first coefficient)
/// and its confidence interval.
pub fn fit_summary(fit: &FitResult) -> ForestSummary {
    let c = fit.coefficient("intercept").unwrap_or(&fit.coefficients[0]);
    ForestSummary {
        estimate: c.estimate,
        ci_lower: c.ci_lower,
        ci_upper: c.ci_upper,
    }
}

/// Fits the model and lays out the plot. A dataset holding a single study
/// cannot be fitted, so it is pooled by inverse variance with a normal
/// interval instead.
pub fn forest_from_model(ds: &Dataset, spec: &ModelSpec, opts: &ForestOptions) -> Result<ForestLayout> {
    if ds.study_count() == 1 {
        let w: Vec<f64> = ds.rows().iter().map(|r| 1.0 / r.var_eff_size).collect();
        let total: f64 = w.iter().sum();
        let est = ds.rows().iter().zip(&w).map(|(r, wi)| wi * r.effect_size).sum::<f64>() / total;
        let half = Z975 / total.sqrt();
        let summary = ForestSummary {
            estimate: est,
            ci_lower: est - half,
            ci_upper: est + half,
        };
        return forest_layout(ds, &w, summary, opts);
    }
    let fit = fit_model(ds, spec)?;
    forest_layout(ds, &fit.weights, fit_summary(&fit), opts)
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
    out
}

fn nice_step(range: f64) -> f64 {
    let raw = range / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let r = raw / mag;
    let m = if r <= 1.0 {
        1.0
    } else if r <= 2.0 {
        2.0
    } else if r <= 5.0 {
        5.0
    } else {
        10.0
    };
    m * mag
}

const ROW_H: f64 = 20.0;
const LABEL_X: f64 = 10.0;
const PLOT_X0: f64 = 260.0;
const PLOT_W: f64 = 300.0;
const EXTRA_W: f64 = 90.0;
const MAX_BOX: f64 = 12.0;

/// Renders the layout as a standalone SVG 1.1 document. Output depends only
/// on the layout.
pub fn render_svg(layout: &ForestLayout) -> String {
    let mut lo = layout.summary.ci_lower.min(0.0);
    let mut hi = layout.summary.ci_upper.max(0.0);
    for r in layout.groups.iter().flat_map(|g| &g.rows) {
        lo = lo.min(r.ci_lower);
        hi = hi.max(r.ci_upper);
    }
    if !(hi > lo) {
        lo -= 1.0;
        hi += 1.0;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let sx = |v: f64| PLOT_X0 + (v - lo) / (hi - lo) * PLOT_W;

    let n_lines = layout.groups.len() + layout.row_count() + 1;
    let width = PLOT_X0 + PLOT_W + 20.0 + EXTRA_W * layout.extra_columns.len() as f64;
    let plot_top = 2.0 * ROW_H;
    let plot_bottom = plot_top + n_lines as f64 * ROW_H;
    let height = plot_bottom + 2.5 * ROW_H;
    let extra_x = |i: usize| PLOT_X0 + PLOT_W + 20.0 + EXTRA_W * i as f64;

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{width:.0}" height="{height:.0}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{LABEL_X:.2}" y="{:.2}" font-weight="bold">Study</text>"#, ROW_H);
    for (i, name) in layout.extra_columns.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-weight="bold" text-anchor="end">{}</text>"#,
            extra_x(i) + EXTRA_W - 10.0,
            ROW_H,
            escape(name)
        );
    }
    let _ = writeln!(
        s,
        r#"<line class="zero" x1="{0:.2}" y1="{1:.2}" x2="{0:.2}" y2="{2:.2}" stroke="gray" stroke-dasharray="3,3"/>"#,
        sx(0.0),
        plot_top,
        plot_bottom
    );

    let mut line = 0usize;
    let y_of = |line: usize| plot_top + (line as f64 + 0.5) * ROW_H;
    for g in &layout.groups {
        let _ = writeln!(s, r#"<g class="group">"#);
        let _ = writeln!(
            s,
            r#"<text x="{LABEL_X:.2}" y="{:.2}" font-weight="bold" dominant-baseline="middle">{}</text>"#,
            y_of(line),
            escape(&g.study)
        );
        line += 1;
        for r in &g.rows {
            let y = y_of(line);
            let side = MAX_BOX * r.box_area.sqrt();
            let _ = writeln!(s, r#"<g class="effect">"#);
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{y:.2}" dominant-baseline="middle">{}</text>"#,
                LABEL_X + 15.0,
                escape(&r.label)
            );
            let _ = writeln!(
                s,
                r#"<line class="ci" x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="black"/>"#,
                sx(r.ci_lower),
                sx(r.ci_upper)
            );
            let _ = writeln!(
                s,
                r#"<rect class="box" x="{:.2}" y="{:.2}" width="{side:.2}" height="{side:.2}" fill="black"/>"#,
                sx(r.estimate) - side / 2.0,
                y - side / 2.0
            );
            for (i, v) in r.extras.iter().enumerate() {
                let _ = writeln!(
                    s,
                    r#"<text x="{:.2}" y="{y:.2}" text-anchor="end" dominant-baseline="middle">{}</text>"#,
                    extra_x(i) + EXTRA_W - 10.0,
                    escape(v)
                );
            }
            let _ = writeln!(s, "</g>");
            line += 1;
        }
        let _ = writeln!(s, "</g>");
    }

    let y = y_of(line);
    let sm = &layout.summary;
    let _ = writeln!(
        s,
        r#"<text x="{LABEL_X:.2}" y="{y:.2}" font-weight="bold" dominant-baseline="middle">RVE Estimate</text>"#
    );
    let _ = writeln!(
        s,
        r#"<polygon class="diamond" points="{:.2},{y:.2} {:.2},{:.2} {:.2},{y:.2} {:.2},{:.2}" fill="black"/>"#,
        sx(sm.ci_lower),
        sx(sm.estimate),
        y - 6.0,
        sx(sm.ci_upper),
        sx(sm.estimate),
        y + 6.0
    );

    let _ = writeln!(
        s,
        r#"<line class="axis" x1="{PLOT_X0:.2}" y1="{plot_bottom:.2}" x2="{:.2}" y2="{plot_bottom:.2}" stroke="black"/>"#,
        PLOT_X0 + PLOT_W
    );
    let step = nice_step(hi - lo);
    let decimals = (-step.log10().floor()).max(0.0) as usize;
    let mut tick = (lo / step).ceil() * step;
    while tick <= hi + 1e-12 * step {
        let x = sx(tick);
        let label = format!("{:.*}", decimals, if tick.abs() < 1e-12 * step { 0.0 } else { tick });
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{plot_bottom:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#,
            plot_bottom + 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{label}</text>"#,
            plot_bottom + 16.0
        );
        tick += step;
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_csv, CsvSchema};
    use crate::weights::WeightModel;

    fn spec() -> ModelSpec {
        ModelSpec::new("es ~ 1".parse().unwrap(), WeightModel::Corr)
    }

    #[test]
    fn single_effect_diamond_centres_on_box() {
        let ds = parse_csv("study,es,v\na,0.4,0.04\n".as_bytes(), &CsvSchema::default()).unwrap();
        let layout = forest_from_model(&ds, &spec(), &ForestOptions::default()).unwrap();
        assert_eq!(layout.row_count(), 1);
        let r = &layout.groups[0].rows[0];
        assert_eq!(layout.summary.estimate, r.estimate);
        assert_eq!(r.box_area, 1.0);
        assert!((r.ci_upper - 0.4 - Z975 * 0.2).abs() < 1e-15);
    }

    #[test]
    fn corr_boxes_equal_within_study() {
        let ds = parse_csv(
            "study,es,v\na,0.1,0.02\na,0.3,0.05\nb,0.2,0.03\nc,0.5,0.04\nc,0.0,0.02\nc,0.3,0.06\n".as_bytes(),
            &CsvSchema::default(),
        )
        .unwrap();
        let layout = forest_from_model(&ds, &spec(), &ForestOptions::default()).unwrap();
        for g in &layout.groups {
            assert!(g.rows.iter().all(|r| (r.box_area - g.rows[0].box_area).abs() < 1e-15));
        }
        let svg = render_svg(&layout);
        assert_eq!(svg.matches(r#"class="box""#).count(), 6);
        assert_eq!(svg.matches(r#"class="group""#).count(), 3);
        assert_eq!(svg.matches(r#"class="diamond""#).count(), 1);
    }

    #[test]
    fn missing_label_column() {
        let ds = parse_csv("study,es,v\na,0.1,0.02\nb,0.2,0.03\n".as_bytes(), &CsvSchema::default()).unwrap();
        let opts = ForestOptions {
            es_label: Some("nope".into()),
            ..Default::default()
        };
        assert!(matches!(
            forest_from_model(&ds, &spec(), &opts),
            Err(RveError::MissingLabelColumn(c)) if c == "nope"
        ));
    }

    #[test]
    fn escapes_markup() {
        assert_eq!(escape("a<b & \"c\">"), "a&lt;b &amp; &quot;c&quot;&gt;");
    }
}
