//! Working-model weights and method-of-moments variance components for the
//! correlated-effects and hierarchical-effects models.

use nalgebra::{DMatrix, DVector};

use crate::design::StudyBlock;
use crate::error::{Result, RveError};
use crate::fit::{xtw, WlsFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightModel {
    /// Correlated effects: equal weights within a study.
    Corr,
    /// Hierarchical effects: per-effect inverse-variance weights.
    Hier,
    /// User-supplied, possibly non-efficient weights.
    User,
}

impl std::str::FromStr for WeightModel {
    type Err = RveError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "corr" => Ok(WeightModel::Corr),
            "hier" => Ok(WeightModel::Hier),
            "user" => Ok(WeightModel::User),
            other => Err(RveError::InvalidConfig(format!("unknown weighting model `{other}`"))),
        }
    }
}

/// Diagonal weight matrices, one vector of diagonal entries per study.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightAssignment {
    pub model: WeightModel,
    pub diag: Vec<DVector<f64>>,
}

impl WeightAssignment {
    /// All weights in block order.
    pub fn flat(&self) -> Vec<f64> {
        self.diag.iter().flat_map(|w| w.iter().copied()).collect()
    }

    pub fn scaled(&self, c: f64) -> WeightAssignment {
        WeightAssignment {
            model: self.model,
            diag: self.diag.iter().map(|w| w * c).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceComponents {
    /// Between-study variance.
    pub tau_sq: f64,
    /// Within-study, between-effect variance (hierarchical model only).
    pub omega_sq: Option<f64>,
    /// Assumed within-study correlation (correlated model only).
    pub rho: Option<f64>,
    /// Weighted residual sum of squares of the preliminary fit.
    pub q_e: f64,
    /// Sum of squared study residual totals (hierarchical model only).
    pub q_1: Option<f64>,
}

fn per_study(blocks: &[StudyBlock], model: WeightModel, f: impl Fn(&StudyBlock) -> DVector<f64>) -> WeightAssignment {
    WeightAssignment {
        model,
        diag: blocks.iter().map(f).collect(),
    }
}

/// Preliminary correlated-effects weights `1 / (k_j * mean_v_j)`.
pub fn corr_prelim_weights(blocks: &[StudyBlock]) -> WeightAssignment {
    corr_weights(blocks, 0.0)
}

/// Correlated-effects weights `1 / (k_j (mean_v_j + tau²))`, constant within a study.
pub fn corr_weights(blocks: &[StudyBlock], tau_sq: f64) -> WeightAssignment {
    per_study(blocks, WeightModel::Corr, |b| {
        DVector::from_element(b.k(), 1.0 / (b.k() as f64 * (b.mean_v + tau_sq)))
    })
}

/// Preliminary hierarchical weights: plain inverse sampling variances.
pub fn hier_prelim_weights(blocks: &[StudyBlock]) -> WeightAssignment {
    hier_weights(blocks, 0.0, 0.0)
}

/// Hierarchical weights `1 / (v_ij + tau² + omega²)`.
pub fn hier_weights(blocks: &[StudyBlock], tau_sq: f64, omega_sq: f64) -> WeightAssignment {
    per_study(blocks, WeightModel::Hier, |b| b.v.map(|v| 1.0 / (v + tau_sq + omega_sq)))
}

/// User weights taken verbatim from the data.
pub fn user_weights(blocks: &[StudyBlock]) -> Result<WeightAssignment> {
    let mut diag = Vec::with_capacity(blocks.len());
    for b in blocks {
        let w = b.user_w.as_ref().ok_or(RveError::MissingUserWeights)?;
        if let Some(i) = w.iter().position(|&x| !(x > 0.0)) {
            return Err(RveError::NonPositiveWeight {
                row: b.rows.get(i).map_or(i, |r| r + 1),
                value: w[i],
            });
        }
        diag.push(w.clone());
    }
    Ok(WeightAssignment {
        model: WeightModel::User,
        diag,
    })
}

/// `Σ e_j' W_j e_j`, identical to `Σ T'WT - (Σ T'WX) Q (Σ X'WT)` at the fitted `b`.
pub fn weighted_rss(fit: &WlsFit, weights: &WeightAssignment) -> f64 {
    fit.residuals
        .iter()
        .zip(&weights.diag)
        .map(|(e, w)| e.iter().zip(w.iter()).map(|(ei, wi)| wi * ei * ei).sum::<f64>())
        .sum()
}

fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(&b.transpose()).sum()
}

/// Method-of-moments between-study variance under the correlated-effects
/// working model, truncated at zero.
///
/// `prelim_weights` must be the output of [`corr_prelim_weights`] and
/// `prelim_fit` the fit under them.
pub fn estimate_tau2_corr(
    blocks: &[StudyBlock],
    prelim_weights: &WeightAssignment,
    prelim_fit: &WlsFit,
    rho: f64,
) -> Result<VarianceComponents> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(RveError::InvalidRho(rho));
    }
    let q = &prelim_fit.bread_inv;
    if q.iter().any(|x| !x.is_finite()) {
        return Err(RveError::SingularCrossProduct);
    }
    let p = q.nrows();
    let m = blocks.len() as f64;
    let q_e = weighted_rss(prelim_fit, prelim_weights);

    let mut within = DMatrix::zeros(p, p);
    let mut off_diag = DMatrix::zeros(p, p);
    let mut between = DMatrix::zeros(p, p);
    let mut total_weight = 0.0;
    for (b, w) in blocks.iter().zip(&prelim_weights.diag) {
        let k = b.k() as f64;
        let wj = w[0];
        let xtx = b.x.transpose() * &b.x;
        let col_sums = b.x.row_sum().transpose();
        let xjx = &col_sums * col_sums.transpose();
        within += &xtx * (wj / k);
        off_diag += (&xjx - &xtx) * (wj / k);
        between += &xjx * (wj * wj);
        total_weight += k * wj;
    }
    let numerator = q_e - m + trace_product(q, &within) + rho * trace_product(q, &off_diag);
    let denominator = total_weight - trace_product(q, &between);
    let tau_sq = (numerator / denominator).max(0.0);

    Ok(VarianceComponents {
        tau_sq,
        omega_sq: None,
        rho: Some(rho),
        q_e,
        q_1: None,
    })
}

/// Coefficients of the exact expectations of the two quadratic forms used by
/// the hierarchical estimator, under `Σ_j = τ²J + ω²I + V_j`:
/// `E[Q_1] = a1 τ² + b1 ω² + c1` and `E[Q_E] = a2 τ² + b2 ω² + c2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HierMoments {
    pub a1: f64,
    pub b1: f64,
    pub c1: f64,
    pub a2: f64,
    pub b2: f64,
    pub c2: f64,
}

/// Evaluates `E[e'Me] = tr(M R S R')` for block-diagonal `M`, `S` and
/// `R = I - XQX'W`, without forming `Σk x Σk` matrices:
///
/// `Σ tr(M_j S_j) - 2 tr(Q Σ X_j'W_j S_j M_j X_j) + tr(Q (Σ X_j'M_jX_j) Q (Σ X_j'W_jS_jW_jX_j))`.
struct QuadraticExpectation {
    trace_ms: f64,
    wsmx: DMatrix<f64>,
    xmx: DMatrix<f64>,
    wsw: DMatrix<f64>,
}

impl QuadraticExpectation {
    fn new(p: usize) -> Self {
        QuadraticExpectation {
            trace_ms: 0.0,
            wsmx: DMatrix::zeros(p, p),
            xmx: DMatrix::zeros(p, p),
            wsw: DMatrix::zeros(p, p),
        }
    }

    fn add(&mut self, x: &DMatrix<f64>, w: &DVector<f64>, m: &DMatrix<f64>, s: &DMatrix<f64>) {
        let xw = xtw(x, w);
        self.trace_ms += trace_product(m, s);
        self.wsmx += &xw * s * m * x;
        self.xmx += x.transpose() * m * x;
        self.wsw += &xw * s * xw.transpose();
    }

    fn value(&self, q: &DMatrix<f64>) -> f64 {
        self.trace_ms - 2.0 * trace_product(q, &self.wsmx) + trace_product(&(q * &self.xmx * q), &self.wsw)
    }
}

/// Exact moment coefficients for the hierarchical model given the weights
/// and fit the quadratic forms were computed under.
pub fn hier_moments(blocks: &[StudyBlock], weights: &WeightAssignment, fit: &WlsFit) -> HierMoments {
    let p = fit.p();
    // (M, S) pairs: M ∈ {J, W}, S ∈ {J, I, V}.
    let mut acc: Vec<QuadraticExpectation> = (0..6).map(|_| QuadraticExpectation::new(p)).collect();
    for (b, w) in blocks.iter().zip(&weights.diag) {
        let k = b.k();
        let ones = DMatrix::from_element(k, k, 1.0);
        let ident = DMatrix::identity(k, k);
        let wmat = DMatrix::from_diagonal(w);
        let vmat = DMatrix::from_diagonal(&b.v);
        let pairs = [
            (&ones, &ones),
            (&ones, &ident),
            (&ones, &vmat),
            (&wmat, &ones),
            (&wmat, &ident),
            (&wmat, &vmat),
        ];
        for (a, (m, s)) in acc.iter_mut().zip(pairs) {
            a.add(&b.x, w, m, s);
        }
    }
    let q = &fit.bread_inv;
    let v: Vec<f64> = acc.iter().map(|a| a.value(q)).collect();
    HierMoments {
        a1: v[0],
        b1: v[1],
        c1: v[2],
        a2: v[3],
        b2: v[4],
        c2: v[5],
    }
}

/// `Σ_j (1' e_j)²`: residual totals per study, squared.
pub fn study_total_rss(fit: &WlsFit) -> f64 {
    fit.residuals.iter().map(|e| e.sum().powi(2)).sum()
}

/// Method-of-moments `ω²` and `τ²` for the hierarchical model.
///
/// Solves the two moment equations for `Q_1` and `Q_E`; `ω²` is truncated at
/// zero first and `τ²` is then recomputed from the `Q_E` equation and
/// truncated. When every study has a single effect size `ω²` is not
/// identified; it is reported as zero and `τ²` falls back to the
/// single-component estimate.
pub fn estimate_hier_components(
    blocks: &[StudyBlock],
    prelim_weights: &WeightAssignment,
    prelim_fit: &WlsFit,
) -> Result<VarianceComponents> {
    if prelim_fit.bread_inv.iter().any(|x| !x.is_finite()) {
        return Err(RveError::SingularCrossProduct);
    }
    let q_e = weighted_rss(prelim_fit, prelim_weights);
    let q_1 = study_total_rss(prelim_fit);
    let mom = hier_moments(blocks, prelim_weights, prelim_fit);

    let (omega_sq, tau_sq) = if blocks.iter().all(|b| b.k() == 1) {
        (0.0, ((q_e - mom.c2) / mom.a2).max(0.0))
    } else {
        let det = mom.b1 * mom.a2 - mom.b2 * mom.a1;
        let scale = (mom.b1 * mom.a2).abs() + (mom.b2 * mom.a1).abs();
        if !(det.abs() > 1e-12 * scale) {
            return Err(RveError::DegenerateMoments);
        }
        let omega = ((mom.a2 * (q_1 - mom.c1) - mom.a1 * (q_e - mom.c2)) / det).max(0.0);
        let tau = ((q_e - mom.c2) / mom.a2 - omega * mom.b2 / mom.a2).max(0.0);
        (omega, tau)
    };

    Ok(VarianceComponents {
        tau_sq,
        omega_sq: Some(omega_sq),
        rho: None,
        q_e,
        q_1: Some(q_1),
    })
}
