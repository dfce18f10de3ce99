//! Weighted least squares over stacked study blocks.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::design::StudyBlock;
use crate::error::{Result, RveError};
use crate::weights::WeightAssignment;

/// Reciprocal condition number below which `X'WX` is treated as singular.
/// Shared by every module that inverts a cross-product matrix.
pub const RCOND_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct WlsFit {
    pub coef: DVector<f64>,
    /// `Q = (X'WX)^{-1}`.
    pub bread_inv: DMatrix<f64>,
    /// Per-study residuals `e_j = T_j - X_j b`.
    pub residuals: Vec<DVector<f64>>,
    /// Per-study diagonal hat blocks `H_jj = X_j Q X_j' W_j`.
    pub hat_blocks: Vec<DMatrix<f64>>,
}

impl WlsFit {
    pub fn p(&self) -> usize {
        self.coef.len()
    }

    /// Residuals stacked in block order.
    pub fn stacked_residuals(&self) -> DVector<f64> {
        let n = self.residuals.iter().map(|e| e.len()).sum();
        DVector::from_iterator(n, self.residuals.iter().flat_map(|e| e.iter().copied()))
    }
}

/// `X_j' diag(w) Y` for a block.
pub(crate) fn xtw(x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut out = x.transpose();
    for (c, wi) in w.iter().enumerate() {
        out.column_mut(c).scale_mut(*wi);
    }
    out
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Names of coefficients whose columns are (numerically) spanned by earlier ones.
fn dependent_columns(xtwx: &DMatrix<f64>) -> Vec<usize> {
    let p = xtwx.nrows();
    let mut kept: Vec<usize> = Vec::new();
    let mut bad = Vec::new();
    for c in 0..p {
        let diag = xtwx[(c, c)];
        if diag <= 0.0 {
            bad.push(c);
            continue;
        }
        let residual = if kept.is_empty() {
            diag
        } else {
            let sub = DMatrix::from_fn(kept.len(), kept.len(), |i, j| xtwx[(kept[i], kept[j])]);
            let cross = DVector::from_iterator(kept.len(), kept.iter().map(|&i| xtwx[(i, c)]));
            match sub.cholesky() {
                Some(ch) => diag - cross.dot(&ch.solve(&cross)),
                None => 0.0,
            }
        };
        if residual <= 1e-10 * diag {
            bad.push(c);
        } else {
            kept.push(c);
        }
    }
    bad
}

/// Reciprocal 2-norm condition number of the diagonally equilibrated matrix.
fn equilibrated_rcond(m: &DMatrix<f64>) -> f64 {
    let p = m.nrows();
    let d: Vec<f64> = (0..p).map(|i| m[(i, i)]).collect();
    if d.iter().any(|&x| !(x > 0.0)) {
        return 0.0;
    }
    let scaled = DMatrix::from_fn(p, p, |i, j| m[(i, j)] / (d[i] * d[j]).sqrt());
    let eig = SymmetricEigen::new(scaled).eigenvalues;
    let max = eig.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let min = eig.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if max == 0.0 {
        0.0
    } else {
        min / max
    }
}

/// Fits `b = (Σ X_j'W_jX_j)^{-1} Σ X_j'W_jT_j`.
///
/// Sums are accumulated in study order. On rank deficiency the error lists
/// the coefficient indices found dependent on earlier columns; callers map
/// them to names.
pub fn wls_fit(blocks: &[StudyBlock], weights: &WeightAssignment) -> Result<WlsFit> {
    assert_eq!(blocks.len(), weights.diag.len(), "one weight vector per block");
    let p = blocks.first().map_or(0, |b| b.x.ncols());
    let n: usize = blocks.iter().map(StudyBlock::k).sum();

    let mut xtwx = DMatrix::zeros(p, p);
    let mut xtwt = DVector::zeros(p);
    for (b, w) in blocks.iter().zip(&weights.diag) {
        let xw = xtw(&b.x, w);
        xtwx += &xw * &b.x;
        xtwt += &xw * &b.t;
    }
    symmetrize(&mut xtwx);

    if n < p || equilibrated_rcond(&xtwx) <= RCOND_THRESHOLD {
        let bad = dependent_columns(&xtwx);
        return Err(RveError::RankDeficientDesign(
            bad.iter().map(|c| format!("#{}", c + 1)).collect(),
        ));
    }
    let chol = xtwx.clone().cholesky().ok_or(RveError::SingularCrossProduct)?;
    let coef = chol.solve(&xtwt);
    let mut bread_inv = chol.inverse();
    symmetrize(&mut bread_inv);

    let residuals = blocks.iter().map(|b| &b.t - &b.x * &coef).collect();
    let hat_blocks = blocks
        .iter()
        .zip(&weights.diag)
        .map(|(b, w)| {
            let mut h = &b.x * &bread_inv * b.x.transpose();
            for (c, wi) in w.iter().enumerate() {
                h.column_mut(c).scale_mut(*wi);
            }
            h
        })
        .collect();

    Ok(WlsFit {
        coef,
        bread_inv,
        residuals,
        hat_blocks,
    })
}

/// The diagonal hat block `H_jj` and the `k_j` rows of `I - H` belonging to
/// study `j` (a `k_j x Σk` matrix, columns in block order).
pub fn hat_block(
    fit: &WlsFit,
    blocks: &[StudyBlock],
    weights: &WeightAssignment,
    j: usize,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n: usize = blocks.iter().map(StudyBlock::k).sum();
    let kj = blocks[j].k();
    let left = &blocks[j].x * &fit.bread_inv;
    let mut rows = DMatrix::zeros(kj, n);
    let mut offset = 0;
    for (l, (b, w)) in blocks.iter().zip(&weights.diag).enumerate() {
        let mut cross = -(&left * b.x.transpose());
        for (c, wi) in w.iter().enumerate() {
            cross.column_mut(c).scale_mut(*wi);
        }
        if l == j {
            for i in 0..kj {
                cross[(i, i)] += 1.0;
            }
        }
        rows.view_mut((0, offset), (kj, b.k())).copy_from(&cross);
        offset += b.k();
    }
    (fit.hat_blocks[j].clone(), rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::WeightModel;

    fn scalar_blocks(t: &[f64]) -> Vec<StudyBlock> {
        t.iter()
            .enumerate()
            .map(|(i, &y)| {
                StudyBlock::new(
                    format!("{i}"),
                    DMatrix::from_element(1, 1, 1.0),
                    DVector::from_element(1, y),
                    DVector::from_element(1, 1.0),
                )
            })
            .collect()
    }

    fn wa(w: &[f64]) -> WeightAssignment {
        WeightAssignment {
            model: WeightModel::User,
            diag: w.iter().map(|&x| DVector::from_element(1, x)).collect(),
        }
    }

    #[test]
    fn weighted_mean_examples() {
        let blocks = scalar_blocks(&[1.0, 3.0]);
        let fit = wls_fit(&blocks, &wa(&[1.0, 1.0])).unwrap();
        assert!((fit.coef[0] - 2.0).abs() < 1e-15);
        let e = fit.stacked_residuals();
        assert!((e[0] + 1.0).abs() < 1e-15 && (e[1] - 1.0).abs() < 1e-15);

        let fit = wls_fit(&blocks, &wa(&[3.0, 1.0])).unwrap();
        assert!((fit.coef[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn saturated_fit_has_zero_residuals() {
        let blocks: Vec<StudyBlock> = [(1.0, 2.0), (2.0, 5.0)]
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| {
                StudyBlock::new(
                    format!("{i}"),
                    DMatrix::from_row_slice(1, 2, &[1.0, x]),
                    DVector::from_element(1, y),
                    DVector::from_element(1, 0.1),
                )
            })
            .collect();
        let fit = wls_fit(&blocks, &wa(&[1.0, 2.0])).unwrap();
        assert!(fit.stacked_residuals().amax() < 1e-12);
    }

    #[test]
    fn hat_blocks_of_constant_projection() {
        let m = 5;
        let blocks = scalar_blocks(&[0.1, 0.4, -0.2, 0.9, 0.3]);
        let w = wa(&[2.0; 5]);
        let fit = wls_fit(&blocks, &w).unwrap();
        let mut trace = 0.0;
        for j in 0..m {
            let (h, rows) = hat_block(&fit, &blocks, &w, j);
            assert!((h[(0, 0)] - 1.0 / m as f64).abs() < 1e-15);
            assert_eq!(rows.ncols(), m);
            assert!((rows[(0, j)] - (1.0 - 1.0 / m as f64)).abs() < 1e-15);
            trace += h.trace();
        }
        assert!((trace - 1.0).abs() < 1e-14);
    }

    #[test]
    fn single_study_cross_rows_reproduce_residuals() {
        let b = StudyBlock::new(
            "a",
            DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 3.0]),
            DVector::from_column_slice(&[0.2, 0.1, 0.7]),
            DVector::from_column_slice(&[0.1, 0.2, 0.3]),
        );
        let w = WeightAssignment {
            model: WeightModel::User,
            diag: vec![DVector::from_column_slice(&[1.0, 2.0, 0.5])],
        };
        let blocks = vec![b];
        let fit = wls_fit(&blocks, &w).unwrap();
        let (h, rows) = hat_block(&fit, &blocks, &w, 0);
        let ident = DMatrix::<f64>::identity(3, 3);
        assert!((&ident - &h - &rows).amax() < 1e-14);
        assert!((&rows * &blocks[0].t - &fit.residuals[0]).amax() < 1e-14);
    }

    #[test]
    fn rank_deficiency_names_dependent_column() {
        let blocks: Vec<StudyBlock> = (0..4)
            .map(|i| {
                let x = i as f64;
                StudyBlock::new(
                    format!("{i}"),
                    DMatrix::from_row_slice(1, 3, &[1.0, x, 2.0 * x]),
                    DVector::from_element(1, x),
                    DVector::from_element(1, 0.1),
                )
            })
            .collect();
        match wls_fit(&blocks, &wa(&[1.0; 4])) {
            Err(RveError::RankDeficientDesign(cols)) => assert_eq!(cols, ["#3"]),
            other => panic!("{other:?}"),
        }
    }
}
