//! Python bindings: `import pyrve`.

use std::collections::HashMap;
use std::fs::File;

use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use rve_core as core;

create_exception!(pyrve, RveError, PyValueError, "Raised for invalid data, formulas or failed fits.");

fn err(e: core::RveError) -> PyErr {
    RveError::new_err(e.to_string())
}

/// Effect sizes grouped by study.
#[pyclass(frozen, module = "pyrve")]
struct Dataset {
    inner: core::Dataset,
}

#[pymethods]
impl Dataset {
    /// Reads a CSV file. Unnamed roles are resolved from common column names.
    #[staticmethod]
    #[pyo3(signature = (path, study=None, effect=None, var=None, userweights=None, factors=vec![]))]
    fn from_csv(
        path: &str,
        study: Option<String>,
        effect: Option<String>,
        var: Option<String>,
        userweights: Option<String>,
        factors: Vec<String>,
    ) -> PyResult<Self> {
        let schema = core::CsvSchema {
            study,
            effect,
            variance: var,
            user_weight: userweights,
            categorical: factors,
            ..Default::default()
        };
        let file = File::open(path).map_err(|e| err(e.into()))?;
        let inner = core::parse_csv(file, &schema).map_err(err)?;
        Ok(Self { inner })
    }

    /// Builds a dataset from a mapping of column name to list of numbers or strings.
    #[staticmethod]
    #[pyo3(signature = (columns, study, effect, var, userweights=None))]
    fn from_columns(
        columns: Vec<(String, Vec<Bound<'_, PyAny>>)>,
        study: String,
        effect: String,
        var: String,
        userweights: Option<String>,
    ) -> PyResult<Self> {
        let cols = columns
            .into_iter()
            .map(|(name, cells)| {
                let values = cells
                    .iter()
                    .map(|c| match c.extract::<f64>() {
                        Ok(x) => Ok(core::Value::Num(x)),
                        Err(_) => c.str().map(|s| core::Value::Cat(s.to_string())),
                    })
                    .collect::<PyResult<Vec<_>>>()?;
                Ok((name, values))
            })
            .collect::<PyResult<Vec<_>>>()?;
        let roles = core::Roles {
            study,
            effect,
            variance: var,
            user_weight: userweights,
        };
        let inner = core::Dataset::from_columns(cols, roles).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn columns(&self) -> Vec<String> {
        self.inner.columns().iter().map(|c| c.name.clone()).collect()
    }

    #[getter]
    fn study_count(&self) -> usize {
        self.inner.study_count()
    }

    fn numeric(&self, name: &str) -> PyResult<Vec<f64>> {
        self.inner.numeric(name).map_err(err)
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv_string()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(rows={}, studies={})", self.inner.len(), self.inner.study_count())
    }
}

#[pyclass(frozen, get_all, skip_from_py_object, module = "pyrve")]
#[derive(Clone)]
struct Coefficient {
    name: String,
    estimate: f64,
    std_err: f64,
    t_value: f64,
    df: f64,
    p_value: f64,
    ci_lower: f64,
    ci_upper: f64,
    sig: String,
    df_warning: bool,
}

#[pymethods]
impl Coefficient {
    fn __repr__(&self) -> String {
        format!(
            "Coefficient(name={:?}, estimate={}, std_err={}, df={})",
            self.name, self.estimate, self.std_err, self.df
        )
    }
}

/// A fitted model.
#[pyclass(frozen, module = "pyrve")]
struct FitResult {
    inner: core::FitResult,
}

#[pymethods]
impl FitResult {
    #[getter]
    fn coefficients(&self) -> Vec<Coefficient> {
        self.inner
            .coefficients
            .iter()
            .map(|c| Coefficient {
                name: c.name.clone(),
                estimate: c.estimate,
                std_err: c.std_err,
                t_value: c.t_value,
                df: c.df,
                p_value: c.p_value,
                ci_lower: c.ci_lower,
                ci_upper: c.ci_upper,
                sig: c.sig_code.to_string(),
                df_warning: c.df_warning,
            })
            .collect()
    }

    fn coefficient(&self, name: &str) -> Option<Coefficient> {
        self.coefficients().into_iter().find(|c| c.name == name)
    }

    #[getter]
    fn tau_sq(&self) -> Option<f64> {
        self.inner.components.as_ref().map(|c| c.tau_sq)
    }

    #[getter]
    fn omega_sq(&self) -> Option<f64> {
        self.inner.components.as_ref().and_then(|c| c.omega_sq)
    }

    #[getter]
    fn i_sq(&self) -> Option<f64> {
        self.inner.i_sq
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.meta.m
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.meta.n
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights.clone()
    }

    #[getter]
    fn residuals(&self) -> Vec<f64> {
        self.inner.residuals.clone()
    }

    /// Robust covariance matrix of the coefficients, row by row.
    #[getter]
    fn covariance(&self) -> Vec<Vec<f64>> {
        let v = &self.inner.covariance.v_star;
        (0..v.nrows()).map(|i| v.row(i).iter().copied().collect()).collect()
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.warnings().to_vec()
    }

    fn report(&self) -> String {
        core::format_fit(&self.inner)
    }

    fn __str__(&self) -> String {
        self.report()
    }
}

/// Estimates, standard errors and τ² across the ρ grid.
#[pyclass(frozen, get_all, module = "pyrve")]
struct SensitivityTable {
    rhos: Vec<f64>,
    names: Vec<String>,
    estimates: Vec<Vec<f64>>,
    std_errs: Vec<Vec<f64>>,
    tau_sq: Vec<f64>,
    text: String,
}

#[pymethods]
impl SensitivityTable {
    fn __str__(&self) -> String {
        self.text.clone()
    }
}

fn spec(formula: &str, model: &str, rho: f64, small: bool, alpha: f64) -> PyResult<core::ModelSpec> {
    let formula = core::parse_formula(formula).map_err(err)?;
    let model: core::WeightModel = model.parse().map_err(err)?;
    let spec = core::ModelSpec::new(formula, model).rho(rho).small(small).alpha(alpha);
    spec.validate().map_err(err)?;
    Ok(spec)
}

/// Fits a meta-regression with robust standard errors.
#[pyfunction]
#[pyo3(signature = (data, formula, model="corr", rho=0.8, small=true, alpha=0.05))]
fn fit(py: Python<'_>, data: &Dataset, formula: &str, model: &str, rho: f64, small: bool, alpha: f64) -> PyResult<FitResult> {
    let spec = spec(formula, model, rho, small, alpha)?;
    let inner = py.detach(|| core::fit_model(&data.inner, &spec)).map_err(err)?;
    Ok(FitResult { inner })
}

/// Refits a correlated effects model at ρ = 0, 0.2, ..., 1.
#[pyfunction]
#[pyo3(signature = (data, formula, small=true))]
fn sensitivity(py: Python<'_>, data: &Dataset, formula: &str, small: bool) -> PyResult<SensitivityTable> {
    let spec = spec(formula, "corr", 0.8, small, 0.05)?;
    let t = py.detach(|| core::sensitivity(&data.inner, &spec)).map_err(err)?;
    Ok(SensitivityTable {
        text: core::format_sensitivity(&t),
        rhos: t.rhos,
        names: t.coef_names,
        estimates: t.estimates,
        std_errs: t.std_errs,
        tau_sq: t.tau_sq,
    })
}

/// Fits the model and returns a forest plot as an SVG document.
#[pyfunction]
#[pyo3(signature = (data, formula, model="corr", rho=0.8, small=true, study_lab=None, es_lab=None, extra=vec![]))]
#[allow(clippy::too_many_arguments)]
fn forest_svg(
    data: &Dataset,
    formula: &str,
    model: &str,
    rho: f64,
    small: bool,
    study_lab: Option<String>,
    es_lab: Option<String>,
    extra: Vec<String>,
) -> PyResult<String> {
    let spec = spec(formula, model, rho, small, 0.05)?;
    let opts = core::ForestOptions {
        study_label: study_lab,
        es_label: es_lab,
        extra_columns: extra,
    };
    let layout = core::forest_from_model(&data.inner, &spec, &opts).map_err(err)?;
    Ok(core::render_svg(&layout))
}

/// Runs a Monte Carlo experiment from `key = value` config text. Returns one
/// dict per (variant, coefficient).
#[pyfunction]
fn simulate(py: Python<'_>, config: &str) -> PyResult<Vec<HashMap<String, Py<PyAny>>>> {
    let cfg = core::parse_config(config).map_err(err)?;
    let report = py.detach(|| core::run_experiment(&cfg)).map_err(err)?;
    report
        .coefficients
        .iter()
        .map(|c| {
            let mut row = HashMap::new();
            row.insert("variant".to_string(), c.variant.name().into_pyobject(py)?.into_any().unbind());
            row.insert("coefficient".to_string(), c.coefficient.clone().into_pyobject(py)?.into_any().unbind());
            for (k, v) in [
                ("true_value", c.true_value),
                ("coverage", c.coverage),
                ("mean_estimate", c.mean_estimate),
                ("var_estimate", c.var_estimate),
                ("mean_v_star", c.mean_v_star),
                ("mean_df", c.mean_df),
                ("mean_tau_sq", report.mean_tau_sq),
            ] {
                row.insert(k.to_string(), v.into_pyobject(py)?.into_any().unbind());
            }
            Ok(row)
        })
        .collect()
}

/// Draws the dataset for one replication of a simulation config.
#[pyfunction]
fn simulate_dataset(config: &str, replication: usize) -> PyResult<Dataset> {
    let cfg = core::parse_config(config).map_err(err)?;
    let inner = core::generate_dataset(&cfg, replication).map_err(err)?;
    Ok(Dataset { inner })
}

#[pymodule]
fn pyrve(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("RveError", m.py().get_type::<RveError>())?;
    m.add_class::<Dataset>()?;
    m.add_class::<Coefficient>()?;
    m.add_class::<FitResult>()?;
    m.add_class::<SensitivityTable>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(sensitivity, m)?)?;
    m.add_function(wrap_pyfunction!(forest_svg, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_dataset, m)?)?;
    Ok(())
}
