//! Sandwich covariance estimators and small-sample adjustment matrices.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::design::StudyBlock;
use crate::error::{Result, RveError};
use crate::fit::{symmetrize, xtw, WlsFit};
use crate::weights::WeightAssignment;

/// Relative eigenvalue floor below which an eigenvalue is treated as zero.
pub const EIGEN_FLOOR: f64 = 1e-10;
/// Relative asymmetry tolerated before symmetrizing.
pub const SYMMETRY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjustmentKind {
    /// Plain sandwich, `A_j = I`.
    None,
    /// Scalar `sqrt(m / (m - p))` inflation.
    Htj,
    /// Bias-reduced linearization under the correlated-effects working model.
    Corr,
    /// Bias-reduced linearization under the hierarchical working model.
    Hier,
    /// Adjustment for user-specified weights.
    UserW,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HalfPower {
    Neg,
    Pos,
}

#[derive(Debug, Clone)]
pub struct RobustCovariance {
    pub v_star: DMatrix<f64>,
    pub kind: AdjustmentKind,
    pub adjustments: Vec<DMatrix<f64>>,
    /// Studies whose adjustment needed the pseudo-inverse.
    pub warnings: Vec<String>,
}

/// Outcome of a symmetric half power: the matrix and whether any eigenvalue
/// was floored to zero.
#[derive(Debug, Clone)]
pub struct HalfPowerResult {
    pub matrix: DMatrix<f64>,
    pub floored: bool,
}

/// `P Λ^{±1/2} P'` for a symmetric positive semidefinite matrix.
///
/// Eigenvalues below `EIGEN_FLOOR * max|λ|` map to zero, so the negative
/// power is a pseudo-inverse square root.
pub fn sym_inv_sqrt(m: &DMatrix<f64>, power: HalfPower) -> Result<HalfPowerResult> {
    assert!(m.is_square(), "square matrix required");
    let scale = m.amax();
    if scale == 0.0 {
        return Ok(HalfPowerResult {
            matrix: DMatrix::zeros(m.nrows(), m.ncols()),
            floored: m.nrows() > 0,
        });
    }
    let asym = (m - m.transpose()).amax() / scale;
    if asym > SYMMETRY_TOL {
        return Err(RveError::NotSymmetric(asym));
    }
    let mut sym = m.clone();
    symmetrize(&mut sym);

    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.amax();
    let floor = EIGEN_FLOOR * max;
    if let Some(&neg) = eig.eigenvalues.iter().find(|&&l| l < -SYMMETRY_TOL * max) {
        return Err(RveError::NotPositiveSemidefinite(neg));
    }
    let mut floored = false;
    let powered = eig.eigenvalues.map(|l| {
        if l < floor {
            floored = true;
            0.0
        } else {
            match power {
                HalfPower::Neg => 1.0 / l.sqrt(),
                HalfPower::Pos => l.sqrt(),
            }
        }
    });
    let p = &eig.eigenvectors;
    let mut out = p * DMatrix::from_diagonal(&powered) * p.transpose();
    symmetrize(&mut out);
    Ok(HalfPowerResult { matrix: out, floored })
}

/// Half power of `m`, treating `m` as zero when it is negligible against
/// `reference`, the scale it would have with no leverage.
fn half_power_against(m: &DMatrix<f64>, reference: f64, power: HalfPower) -> Result<HalfPowerResult> {
    if m.amax() <= EIGEN_FLOOR * reference {
        return Ok(HalfPowerResult {
            matrix: DMatrix::zeros(m.nrows(), m.ncols()),
            floored: true,
        });
    }
    sym_inv_sqrt(m, power)
}

/// `sqrt(m / (m - p)) I_k`.
pub fn adjustment_htj(m: usize, p: usize, k: usize) -> Result<DMatrix<f64>> {
    if m <= p {
        return Err(RveError::TooFewStudies { m, p });
    }
    let c = (m as f64 / (m - p) as f64).sqrt();
    Ok(DMatrix::identity(k, k) * c)
}

/// `(I - H_jj)^{-1/2}`.
pub fn adjustment_corr(h_jj: &DMatrix<f64>) -> Result<HalfPowerResult> {
    let k = h_jj.nrows();
    half_power_against(&(DMatrix::identity(k, k) - h_jj), 1.0, HalfPower::Neg)
}

/// `W^{-1/2} [W^{-1/2} (I - H_jj) W^{-3/2}]^{-1/2} W^{-1/2}`.
pub fn adjustment_hier(w: &DVector<f64>, h_jj: &DMatrix<f64>) -> Result<HalfPowerResult> {
    let k = h_jj.nrows();
    let w_mhalf = w.map(|x| 1.0 / x.sqrt());
    let w_m3half = w.map(|x| x.powf(-1.5));
    let inner = DMatrix::from_diagonal(&w_mhalf)
        * (DMatrix::identity(k, k) - h_jj)
        * DMatrix::from_diagonal(&w_m3half);
    let reference = w.iter().fold(0.0f64, |a, &x| a.max(x.powi(-2)));
    let root = half_power_against(&inner, reference, HalfPower::Neg)?;
    let d = DMatrix::from_diagonal(&w_mhalf);
    Ok(HalfPowerResult {
        matrix: &d * root.matrix * &d,
        floored: root.floored,
    })
}

/// `mean_v^{1/2} [(I - H)_j V (I - H)_j']^{-1/2}`, given the bracketed
/// `k_j x k_j` matrix.
pub fn adjustment_userw(mean_v: f64, residual_cov: &DMatrix<f64>) -> Result<HalfPowerResult> {
    let root = half_power_against(residual_cov, mean_v, HalfPower::Neg)?;
    Ok(HalfPowerResult {
        matrix: root.matrix * mean_v.sqrt(),
        floored: root.floored,
    })
}

/// Cross products shared by every `(I - H)_j Φ (I - H)_j'` block:
/// `M = Σ_l X_l' W_l Φ_l W_l X_l`.
pub(crate) fn phi_meat(blocks: &[StudyBlock], weights: &WeightAssignment, phi: &[DVector<f64>]) -> DMatrix<f64> {
    let p = blocks.first().map_or(0, |b| b.x.ncols());
    let mut m = DMatrix::zeros(p, p);
    for ((b, w), ph) in blocks.iter().zip(&weights.diag).zip(phi) {
        let xw = xtw(&b.x, w);
        m += xtw(&xw.transpose(), ph) * xw.transpose();
    }
    m
}

/// `(I - H)_j Φ (I - H)_j'` for block-diagonal `Φ` given as per-study
/// diagonals, without forming the `Σk` rows of `I - H`.
pub fn residual_cov_block(
    block: &StudyBlock,
    w: &DVector<f64>,
    phi_j: &DVector<f64>,
    fit: &WlsFit,
    meat: &DMatrix<f64>,
) -> DMatrix<f64> {
    let q = &fit.bread_inv;
    let xq = &block.x * q;
    let cross = &xq * xtw(&block.x, &w.component_mul(phi_j));
    let mut out = DMatrix::from_diagonal(phi_j) - &cross - cross.transpose() + &xq * meat * xq.transpose();
    symmetrize(&mut out);
    out
}

/// Per-study adjustment matrices of the given kind.
pub fn adjustments(
    kind: AdjustmentKind,
    blocks: &[StudyBlock],
    weights: &WeightAssignment,
    fit: &WlsFit,
) -> Result<(Vec<DMatrix<f64>>, Vec<String>)> {
    let m = blocks.len();
    let p = fit.p();
    let mut warnings = Vec::new();
    let mut note = |j: usize, floored: bool| {
        if floored {
            let msg = format!(
                "study {}: adjustment matrix is singular, pseudo-inverse used",
                blocks[j].study_id
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
    };
    let mats = match kind {
        AdjustmentKind::None => blocks.iter().map(|b| DMatrix::identity(b.k(), b.k())).collect(),
        AdjustmentKind::Htj => blocks
            .iter()
            .map(|b| adjustment_htj(m, p, b.k()))
            .collect::<Result<Vec<_>>>()?,
        AdjustmentKind::Corr => {
            let mut out = Vec::with_capacity(m);
            for (j, h) in fit.hat_blocks.iter().enumerate() {
                let r = adjustment_corr(h)?;
                note(j, r.floored);
                out.push(r.matrix);
            }
            out
        }
        AdjustmentKind::Hier => {
            let mut out = Vec::with_capacity(m);
            for (j, (h, w)) in fit.hat_blocks.iter().zip(&weights.diag).enumerate() {
                let r = adjustment_hier(w, h)?;
                note(j, r.floored);
                out.push(r.matrix);
            }
            out
        }
        AdjustmentKind::UserW => {
            let phi = working_mean_variances(blocks);
            let meat = phi_meat(blocks, weights, &phi);
            let mut out = Vec::with_capacity(m);
            for (j, b) in blocks.iter().enumerate() {
                let cov = residual_cov_block(b, &weights.diag[j], &phi[j], fit, &meat);
                let r = adjustment_userw(b.mean_v, &cov)?;
                note(j, r.floored);
                out.push(r.matrix);
            }
            out
        }
    };
    Ok((mats, warnings))
}

/// The diagonal working covariance used with user weights: each effect size
/// carries its study's average sampling variance.
pub fn working_mean_variances(blocks: &[StudyBlock]) -> Vec<DVector<f64>> {
    blocks.iter().map(|b| DVector::from_element(b.k(), b.mean_v)).collect()
}

/// `V* = Q (Σ X_j' W_j A_j e_j e_j' A_j W_j X_j) Q`, accumulated in study order.
pub fn robust_covariance(
    fit: &WlsFit,
    blocks: &[StudyBlock],
    weights: &WeightAssignment,
    adjustments: Vec<DMatrix<f64>>,
    kind: AdjustmentKind,
) -> RobustCovariance {
    let p = fit.p();
    let mut meat = DMatrix::zeros(p, p);
    for (((b, w), a), e) in blocks.iter().zip(&weights.diag).zip(&adjustments).zip(&fit.residuals) {
        let s = xtw(&b.x, w) * (a * e);
        meat += &s * s.transpose();
    }
    let mut v_star = &fit.bread_inv * meat * &fit.bread_inv;
    symmetrize(&mut v_star);
    RobustCovariance {
        v_star,
        kind,
        adjustments,
        warnings: Vec::new(),
    }
}
