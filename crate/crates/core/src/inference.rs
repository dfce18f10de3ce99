//! Model pipeline, Satterthwaite degrees of freedom, tests and intervals.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::Dataset;
use crate::design::{build_design, Design, StudyBlock};
use crate::error::{Result, RveError, Stage, StageExt};
use crate::fit::{wls_fit, WlsFit};
use crate::formula::Formula;
use crate::robustvar::{self, AdjustmentKind, RobustCovariance};
use crate::tdist;
use crate::weights::{self, VarianceComponents, WeightAssignment, WeightModel};

/// ρ values used by [`sensitivity`].
pub const RHO_GRID: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
/// Below this many degrees of freedom a coefficient is flagged.
pub const DF_WARNING_THRESHOLD: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub formula: Formula,
    pub model: WeightModel,
    /// Assumed within-study correlation; only used by the correlated model.
    pub rho: f64,
    /// Small-sample corrections with Satterthwaite df.
    pub small: bool,
    pub alpha: f64,
}

impl ModelSpec {
    pub fn new(formula: Formula, model: WeightModel) -> Self {
        ModelSpec {
            formula,
            model,
            rho: 0.8,
            small: true,
            alpha: 0.05,
        }
    }

    pub fn rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    pub fn small(mut self, small: bool) -> Self {
        self.small = small;
        self
    }

    pub fn alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(RveError::InvalidRho(self.rho));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(RveError::InvalidAlpha(self.alpha));
        }
        Ok(())
    }
}

/// `small = false` selects the scalar correction for every model.
pub fn adjustment_kind(small: bool, model: WeightModel) -> AdjustmentKind {
    match (small, model) {
        (false, _) => AdjustmentKind::Htj,
        (true, WeightModel::Corr) => AdjustmentKind::Corr,
        (true, WeightModel::Hier) => AdjustmentKind::Hier,
        (true, WeightModel::User) => AdjustmentKind::UserW,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientReport {
    pub name: String,
    pub estimate: f64,
    pub std_err: f64,
    pub t_value: f64,
    pub df: f64,
    pub p_value: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub sig_code: &'static str,
    pub df_warning: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelMeta {
    pub m: usize,
    pub n: usize,
    pub k_min: usize,
    pub k_mean: f64,
    pub k_median: f64,
    pub k_max: usize,
    pub rho: Option<f64>,
    pub model: WeightModel,
    pub small: bool,
    pub formula: String,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub coefficients: Vec<CoefficientReport>,
    /// `None` for user weights.
    pub components: Option<VarianceComponents>,
    pub i_sq: Option<f64>,
    pub meta: ModelMeta,
    pub covariance: RobustCovariance,
    /// Final weight of every effect size, in dataset row order.
    pub weights: Vec<f64>,
    /// Final-fit residuals, in dataset row order.
    pub residuals: Vec<f64>,
}

impl FitResult {
    pub fn coefficient(&self, name: &str) -> Option<&CoefficientReport> {
        self.coefficients.iter().find(|c| c.name == name)
    }

    pub fn warnings(&self) -> &[String] {
        &self.covariance.warnings
    }
}

/// `max(0, (Q_E - df) / Q_E) * 100`.
pub fn i_squared(q_e: f64, df: f64) -> f64 {
    if q_e <= 0.0 {
        return 0.0;
    }
    ((q_e - df) / q_e * 100.0).max(0.0)
}

pub fn sig_code(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.10 {
        "*"
    } else {
        ""
    }
}

/// Working covariance diagonals `Φ_j` the Satterthwaite moments are taken
/// under: `W^{-1}` for the efficient-weight models, the study mean sampling
/// variances for user weights.
fn working_phi(blocks: &[StudyBlock], weights: &WeightAssignment) -> Vec<DVector<f64>> {
    match weights.model {
        WeightModel::User => robustvar::working_mean_variances(blocks),
        _ => weights.diag.iter().map(|w| w.map(|x| 1.0 / x)).collect(),
    }
}

/// Satterthwaite degrees of freedom for every coefficient.
///
/// Uses the `m x m` Gram matrix `G_ij = g_i' Φ g_j` of the vectors
/// `g_j = (I - H)_j' A_j W_j X_j Q l_k`; its nonzero eigenvalues are those of
/// the full `Σk x Σk` form, so `df = tr(G)² / ||G||_F²`.
pub fn satterthwaite_dfs(
    blocks: &[StudyBlock],
    weights: &WeightAssignment,
    fit: &WlsFit,
    adjustments: &[DMatrix<f64>],
) -> Vec<f64> {
    let phi = working_phi(blocks, weights);
    let meat = robustvar::phi_meat(blocks, weights, &phi);
    (0..fit.p())
        .map(|k| gram_df(blocks, weights, fit, adjustments, &phi, &meat, k))
        .collect()
}

/// Satterthwaite degrees of freedom for coefficient `k`.
pub fn satterthwaite_df(
    blocks: &[StudyBlock],
    weights: &WeightAssignment,
    fit: &WlsFit,
    adjustments: &[DMatrix<f64>],
    k: usize,
) -> f64 {
    let phi = working_phi(blocks, weights);
    let meat = robustvar::phi_meat(blocks, weights, &phi);
    gram_df(blocks, weights, fit, adjustments, &phi, &meat, k)
}

fn gram_df(
    blocks: &[StudyBlock],
    weights: &WeightAssignment,
    fit: &WlsFit,
    adjustments: &[DMatrix<f64>],
    phi: &[DVector<f64>],
    meat: &DMatrix<f64>,
    k: usize,
) -> f64 {
    let m = blocks.len();
    let p = fit.p();
    let q = &fit.bread_inv;
    let ql = q.column(k).clone_owned();
    let mut s = DVector::zeros(m);
    let mut c = DMatrix::zeros(p, m);
    let mut f = DMatrix::zeros(p, m);
    for (j, b) in blocks.iter().enumerate() {
        let w = &weights.diag[j];
        let u = &adjustments[j] * w.component_mul(&(&b.x * &ql));
        let phi_u = phi[j].component_mul(&u);
        s[j] = u.dot(&phi_u);
        c.set_column(j, &(q * (b.x.transpose() * &u)));
        f.set_column(j, &(b.x.transpose() * w.component_mul(&phi_u)));
    }
    let fc = f.transpose() * &c;
    let mut g = c.transpose() * meat * &c - &fc - fc.transpose();
    for j in 0..m {
        g[(j, j)] += s[j];
    }
    let trace = g.trace();
    let frob = g.norm_squared();
    if frob > 0.0 {
        trace * trace / frob
    } else {
        f64::NAN
    }
}

fn name_dependent(err: RveError, names: &[String]) -> RveError {
    match err {
        RveError::RankDeficientDesign(cols) => RveError::RankDeficientDesign(
            cols.into_iter()
                .map(|c| {
                    c.strip_prefix('#')
                        .and_then(|i| i.parse::<usize>().ok())
                        .and_then(|i| names.get(i - 1).cloned())
                        .unwrap_or(c)
                })
                .collect(),
        ),
        other => other,
    }
}

fn median(sorted: &[usize]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    }
}

fn in_row_order(blocks: &[StudyBlock], values: &[DVector<f64>]) -> Vec<f64> {
    let n: usize = blocks.iter().map(StudyBlock::k).sum();
    let mut out = vec![0.0; n];
    let mut next = 0;
    for (b, v) in blocks.iter().zip(values) {
        for (i, x) in v.iter().enumerate() {
            let row = b.rows.get(i).copied().unwrap_or(next);
            out[row] = *x;
            next += 1;
        }
    }
    out
}

/// Runs the full pipeline: preliminary fit, variance components, final
/// weights and fit, small-sample adjustment and inference.
pub fn fit_model(ds: &Dataset, spec: &ModelSpec) -> Result<FitResult> {
    spec.validate()?;
    let design = build_design(ds, &spec.formula).stage(Stage::Design)?;
    fit_design(&design, spec)
}

/// [`fit_model`] on an already expanded design.
pub fn fit_design(design: &Design, spec: &ModelSpec) -> Result<FitResult> {
    spec.validate()?;
    let blocks = &design.blocks;
    let (m, p) = (design.m(), design.p());
    if m < 2 || m <= p {
        return Err(RveError::TooFewStudies { m, p }.at(Stage::Design));
    }
    let names = &design.coef_names;
    let fit_with = |w: &WeightAssignment| wls_fit(blocks, w).map_err(|e| name_dependent(e, names));

    let (components, final_weights) = match spec.model {
        WeightModel::Corr => {
            let prelim = weights::corr_prelim_weights(blocks);
            let prelim_fit = fit_with(&prelim).stage(Stage::PreliminaryFit)?;
            let vc = weights::estimate_tau2_corr(blocks, &prelim, &prelim_fit, spec.rho)
                .stage(Stage::VarianceComponents)?;
            let w = weights::corr_weights(blocks, vc.tau_sq);
            (Some(vc), w)
        }
        WeightModel::Hier => {
            let prelim = weights::hier_prelim_weights(blocks);
            let prelim_fit = fit_with(&prelim).stage(Stage::PreliminaryFit)?;
            let vc = weights::estimate_hier_components(blocks, &prelim, &prelim_fit)
                .stage(Stage::VarianceComponents)?;
            let w = weights::hier_weights(blocks, vc.tau_sq, vc.omega_sq.unwrap_or(0.0));
            (Some(vc), w)
        }
        WeightModel::User => (None, weights::user_weights(blocks).stage(Stage::Design)?),
    };
    log::debug!("variance components: {components:?}");

    let Inference {
        coefficients,
        covariance,
        fit,
    } = infer_with_weights(design, &final_weights, spec.small, spec.alpha)?;

    let mut ks: Vec<usize> = blocks.iter().map(StudyBlock::k).collect();
    ks.sort_unstable();
    let n = design.n();
    let meta = ModelMeta {
        m,
        n,
        k_min: ks[0],
        k_mean: n as f64 / m as f64,
        k_median: median(&ks),
        k_max: ks[m - 1],
        rho: (spec.model == WeightModel::Corr).then_some(spec.rho),
        model: spec.model,
        small: spec.small,
        formula: spec.formula.source().to_string(),
    };
    let i_sq = components.as_ref().map(|vc| i_squared(vc.q_e, (m - p) as f64));

    Ok(FitResult {
        coefficients,
        components,
        i_sq,
        meta,
        covariance,
        weights: in_row_order(blocks, &final_weights.diag),
        residuals: in_row_order(blocks, &fit.residuals),
    })
}

/// Output of the final fit and inference stages.
#[derive(Debug, Clone)]
pub struct Inference {
    pub coefficients: Vec<CoefficientReport>,
    pub covariance: RobustCovariance,
    pub fit: WlsFit,
}

/// Final fit, adjustment and per-coefficient inference under fixed weights.
pub fn infer_with_weights(design: &Design, weights: &WeightAssignment, small: bool, alpha: f64) -> Result<Inference> {
    let blocks = &design.blocks;
    let (m, p) = (design.m(), design.p());
    let names = &design.coef_names;
    let fit = wls_fit(blocks, weights)
        .map_err(|e| name_dependent(e, names))
        .stage(Stage::FinalFit)?;
    let kind = adjustment_kind(small, weights.model);
    let (adj, warnings) = robustvar::adjustments(kind, blocks, weights, &fit).stage(Stage::Adjustment)?;
    let dfs = if small {
        satterthwaite_dfs(blocks, weights, &fit, &adj)
    } else {
        vec![m.saturating_sub(p) as f64; p]
    };
    let mut covariance = robustvar::robust_covariance(&fit, blocks, weights, adj, kind);
    covariance.warnings = warnings;

    let mut coefficients = Vec::with_capacity(p);
    for (k, name) in names.iter().enumerate() {
        let estimate = fit.coef[k];
        let std_err = covariance.v_star[(k, k)].max(0.0).sqrt();
        let t_value = estimate / std_err;
        let df = dfs[k];
        let (p_value, crit) = if df.is_finite() && df > 0.0 {
            (
                tdist::two_sided_p(t_value, df).stage(Stage::Inference)?,
                tdist::t_quantile(1.0 - alpha / 2.0, df).stage(Stage::Inference)?,
            )
        } else {
            (f64::NAN, f64::NAN)
        };
        coefficients.push(CoefficientReport {
            name: name.clone(),
            estimate,
            std_err,
            t_value,
            df,
            p_value,
            ci_lower: estimate - crit * std_err,
            ci_upper: estimate + crit * std_err,
            sig_code: sig_code(p_value),
            df_warning: df < DF_WARNING_THRESHOLD,
        });
    }
    Ok(Inference {
        coefficients,
        covariance,
        fit,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityTable {
    pub rhos: Vec<f64>,
    pub coef_names: Vec<String>,
    /// `estimates[k][r]`: coefficient `k` at `rhos[r]`.
    pub estimates: Vec<Vec<f64>>,
    pub std_errs: Vec<Vec<f64>>,
    pub tau_sq: Vec<f64>,
}

/// Refits the correlated-effects model at every ρ in [`RHO_GRID`].
pub fn sensitivity(ds: &Dataset, spec: &ModelSpec) -> Result<SensitivityTable> {
    if spec.model != WeightModel::Corr {
        return Err(RveError::WrongModel);
    }
    let design = build_design(ds, &spec.formula).stage(Stage::Design)?;
    let fits = RHO_GRID
        .par_iter()
        .map(|&rho| fit_design(&design, &spec.clone().rho(rho)))
        .collect::<Result<Vec<_>>>()?;
    let p = design.p();
    Ok(SensitivityTable {
        rhos: RHO_GRID.to_vec(),
        coef_names: design.coef_names.clone(),
        estimates: (0..p)
            .map(|k| fits.iter().map(|f| f.coefficients[k].estimate).collect())
            .collect(),
        std_errs: (0..p)
            .map(|k| fits.iter().map(|f| f.coefficients[k].std_err).collect())
            .collect(),
        tau_sq: fits
            .iter()
            .map(|f| f.components.as_ref().map_or(0.0, |c| c.tau_sq))
            .collect(),
    })
}
