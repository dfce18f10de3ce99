//! Expansion of a formula against a dataset into per-study design blocks.

use nalgebra::{DMatrix, DVector};

use crate::data::{ColumnKind, Dataset, Value};
use crate::error::{Result, RveError};
use crate::formula::{Formula, Term};

/// The rows of one study: design matrix, outcomes and sampling variances.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyBlock {
    pub study_id: String,
    /// Indices of this study's rows in the source dataset.
    pub rows: Vec<usize>,
    pub x: DMatrix<f64>,
    pub t: DVector<f64>,
    pub v: DVector<f64>,
    /// Average sampling variance of the study's effect sizes.
    pub mean_v: f64,
    pub user_w: Option<DVector<f64>>,
}

impl StudyBlock {
    pub fn new(study_id: impl Into<String>, x: DMatrix<f64>, t: DVector<f64>, v: DVector<f64>) -> Self {
        let k = t.len();
        assert!(k >= 1 && x.nrows() == k && v.len() == k, "inconsistent block dimensions");
        let mean_v = v.sum() / k as f64;
        StudyBlock {
            study_id: study_id.into(),
            rows: Vec::new(),
            x,
            t,
            v,
            mean_v,
            user_w: None,
        }
    }

    pub fn k(&self) -> usize {
        self.t.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub blocks: Vec<StudyBlock>,
    pub coef_names: Vec<String>,
}

impl Design {
    pub fn p(&self) -> usize {
        self.coef_names.len()
    }

    pub fn m(&self) -> usize {
        self.blocks.len()
    }

    pub fn n(&self) -> usize {
        self.blocks.iter().map(StudyBlock::k).sum()
    }
}

/// Design columns generated by one variable: either the numeric column itself
/// or indicators for each non-reference level.
fn variable_columns(ds: &Dataset, name: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let col = ds
        .column(name)
        .ok_or_else(|| RveError::UnknownColumn(name.to_string()))?;
    let values = ds.values(name)?;
    match col.kind {
        ColumnKind::Numeric => Ok(vec![(
            name.to_string(),
            values.iter().map(|v| v.as_f64().unwrap()).collect(),
        )]),
        ColumnKind::Categorical => {
            let mut levels: Vec<String> = values.iter().map(|v| v.to_text()).collect();
            levels.sort();
            levels.dedup();
            Ok(levels
                .iter()
                .skip(1)
                .map(|level| {
                    let ind = values
                        .iter()
                        .map(|v| match v {
                            Value::Cat(s) if s == level => 1.0,
                            Value::Num(x) if x.to_string() == *level => 1.0,
                            _ => 0.0,
                        })
                        .collect();
                    (format!("{name}{level}"), ind)
                })
                .collect())
        }
    }
}

/// Builds the stacked design, one block per study in order of first appearance.
///
/// Categorical variables are encoded as indicators with the lexicographically
/// first level as reference. Rank problems are not detected here; the fit
/// reports them.
pub fn build_design(ds: &Dataset, formula: &Formula) -> Result<Design> {
    let response_col = ds
        .column(&formula.response)
        .ok_or_else(|| RveError::UnknownColumn(formula.response.clone()))?;
    if response_col.kind != ColumnKind::Numeric {
        return Err(RveError::NotNumeric(formula.response.clone()));
    }
    let response = ds.numeric(&formula.response)?;
    let n = ds.len();

    let mut names = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for term in &formula.terms {
        match term {
            Term::Intercept => {
                names.push("intercept".to_string());
                cols.push(vec![1.0; n]);
            }
            Term::Main(c) => {
                for (name, col) in variable_columns(ds, c)? {
                    names.push(name);
                    cols.push(col);
                }
            }
            Term::Interaction(a, b) => {
                let left = variable_columns(ds, a)?;
                let right = variable_columns(ds, b)?;
                for (la, ca) in &left {
                    for (lb, cb) in &right {
                        names.push(format!("{la}:{lb}"));
                        cols.push(ca.iter().zip(cb).map(|(x, y)| x * y).collect());
                    }
                }
            }
        }
    }
    if names.is_empty() {
        return Err(RveError::EmptyDesign);
    }
    let p = names.len();

    let blocks = ds
        .study_groups()
        .into_iter()
        .map(|(study_id, rows)| {
            let k = rows.len();
            let x = DMatrix::from_fn(k, p, |i, c| cols[c][rows[i]]);
            let t = DVector::from_iterator(k, rows.iter().map(|&r| response[r]));
            let v = DVector::from_iterator(k, rows.iter().map(|&r| ds.rows()[r].var_eff_size));
            let user_w = if ds.rows().iter().all(|r| r.user_weight.is_some()) && ds.roles().user_weight.is_some() {
                Some(DVector::from_iterator(
                    k,
                    rows.iter().map(|&r| ds.rows()[r].user_weight.unwrap()),
                ))
            } else {
                None
            };
            let mut block = StudyBlock::new(study_id, x, t, v);
            block.rows = rows;
            block.user_w = user_w;
            block
        })
        .collect();

    Ok(Design {
        blocks,
        coef_names: names,
    })
}
