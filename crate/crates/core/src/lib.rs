//! Robust variance estimation for meta-regression with dependent effect sizes.
//!
//! The pipeline reads effect sizes grouped by study, fits weighted least
//! squares under a correlated-effects, hierarchical-effects or user-supplied
//! weighting scheme, and reports sandwich standard errors with optional
//! small-sample corrections and Satterthwaite degrees of freedom.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod design;
pub mod error;
pub mod fit;
pub mod formula;
pub mod inference;
pub mod report;
pub mod forest;
pub mod robustvar;
pub mod simlab;
pub mod tdist;
pub mod weights;

pub use data::{group_center, group_mean, parse_csv, Column, ColumnKind, CsvSchema, Dataset, EffectSizeRow, Roles, Value};
pub use design::{build_design, Design, StudyBlock};
pub use error::{Result, RveError, Stage};
pub use fit::{hat_block, wls_fit, WlsFit, RCOND_THRESHOLD};
pub use formula::{parse_formula, Formula, Term};
pub use inference::{
    adjustment_kind, fit_design, fit_model, i_squared, infer_with_weights, satterthwaite_df, satterthwaite_dfs, sensitivity, sig_code,
    CoefficientReport, FitResult, Inference, ModelMeta, ModelSpec, SensitivityTable, RHO_GRID,
};
pub use robustvar::{sym_inv_sqrt, AdjustmentKind, HalfPower, RobustCovariance};
pub use tdist::{t_cdf, t_quantile, t_sf, two_sided_p};
pub use weights::{VarianceComponents, WeightAssignment, WeightModel};
pub use forest::{forest_from_model, forest_layout, render_svg, ForestLayout, ForestOptions};
pub use report::{format_fit, format_sensitivity};
pub use simlab::{generate_dataset, parse_config, run_experiment, SimConfig, SimReport};
