//! Monte Carlo harness: simulate meta-analytic data under the correlated and
//! hierarchical working models and summarize estimator behaviour.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::data::{Dataset, Roles, Value};
use crate::design::build_design;
use crate::error::{Result, RveError};
use crate::formula::Formula;
use crate::inference::{fit_design, infer_with_weights, ModelSpec};
use crate::weights::{self, WeightModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimModel {
    Corr,
    Hier,
}

/// Number of effect sizes per study.
#[derive(Debug, Clone, PartialEq)]
pub enum StudySizes {
    Fixed(usize),
    /// One entry per study; its length must equal `m`.
    PerStudy(Vec<usize>),
}

/// Sampling variance of each effect size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VarianceGen {
    Fixed(f64),
    Uniform(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CovariateGen {
    /// Intercept-only model.
    None,
    /// Study-level indicator, one for every other study.
    Balanced,
    /// Effect-level indicator with exactly `round(prop * N)` ones at random rows.
    Skewed(f64),
    /// Effect-level standard normal.
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Scalar correction with `m - p` df.
    Large,
    /// Working-model adjustment with Satterthwaite df.
    Small,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Large => "large",
            Variant::Small => "small",
        }
    }
}

/// Where the final weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightSource {
    /// Method-of-moments components, as in an ordinary fit.
    Estimated,
    /// The true variance components.
    Oracle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub model: SimModel,
    pub m: usize,
    pub k: StudySizes,
    /// Intercept, then slope when a covariate is generated.
    pub beta: Vec<f64>,
    pub tau_sq: f64,
    pub omega_sq: f64,
    pub rho: f64,
    pub variance: VarianceGen,
    pub covariate: CovariateGen,
    pub replications: usize,
    pub seed: u64,
    pub variants: Vec<Variant>,
    pub weights: WeightSource,
}

impl SimConfig {
    /// A configuration with the given model, size and seed and neutral
    /// defaults elsewhere.
    pub fn new(model: SimModel, m: usize, seed: u64) -> Self {
        SimConfig {
            model,
            m,
            k: StudySizes::Fixed(3),
            beta: vec![0.0],
            tau_sq: 0.0,
            omega_sq: 0.0,
            rho: 0.0,
            variance: VarianceGen::Fixed(0.05),
            covariate: CovariateGen::None,
            replications: 100,
            seed,
            variants: vec![Variant::Large, Variant::Small],
            weights: WeightSource::Estimated,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(RveError::InvalidConfig(msg));
        if self.m < 2 {
            return bad(format!("m must be at least 2, got {}", self.m));
        }
        if self.replications == 0 {
            return bad("replications must be at least 1".into());
        }
        let want_beta = if self.covariate == CovariateGen::None { 1 } else { 2 };
        if self.beta.len() != want_beta {
            return bad(format!("beta needs {want_beta} value(s), got {}", self.beta.len()));
        }
        if !(self.tau_sq >= 0.0 && self.omega_sq >= 0.0) {
            return bad("variance components must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        match self.variance {
            VarianceGen::Fixed(v) if v > 0.0 => {}
            VarianceGen::Uniform(a, b) if a > 0.0 && b >= a => {}
            _ => return bad("sampling variances must be positive".into()),
        }
        match &self.k {
            StudySizes::Fixed(k) if *k >= 1 => {}
            StudySizes::PerStudy(ks) if ks.len() == self.m && ks.iter().all(|&k| k >= 1) => {}
            _ => return bad("study sizes must be >= 1, one per study".into()),
        }
        if let CovariateGen::Skewed(p) = self.covariate {
            if !(p > 0.0 && p < 1.0) {
                return bad(format!("skewed proportion must lie in (0, 1), got {p}"));
            }
        }
        if self.variants.is_empty() {
            return bad("no estimator variants selected".into());
        }
        Ok(())
    }

    fn study_size(&self, j: usize) -> usize {
        match &self.k {
            StudySizes::Fixed(k) => *k,
            StudySizes::PerStudy(ks) => ks[j],
        }
    }

    fn formula(&self) -> Formula {
        let text = if self.covariate == CovariateGen::None { "es ~ 1" } else { "es ~ x" };
        text.parse().expect("static formula")
    }

    fn weight_model(&self) -> WeightModel {
        match self.model {
            SimModel::Corr => WeightModel::Corr,
            SimModel::Hier => WeightModel::Hier,
        }
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| RveError::InvalidConfig(format!("bad value `{s}` for `{key}`")))
        })
        .collect()
}

fn parse_one<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| RveError::InvalidConfig(format!("bad value `{value}` for `{key}`")))
}

/// Parses a flat `key = value` configuration. `#` starts a comment.
///
/// Keys: `model` (corr|hier), `m`, `k` (one value or a comma list),
/// `beta`, `tau_sq`, `omega_sq`, `rho`, `v` (a value or `lo:hi`),
/// `covariate` (none|balanced|skewed:PROP|normal), `replications`, `seed`,
/// `variants` (comma list of large|small), `weights` (estimated|oracle).
/// `model`, `m` and `seed` are required.
pub fn parse_config(text: &str) -> Result<SimConfig> {
    let mut model = None;
    let mut m = None;
    let mut seed = None;
    let mut rest = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| RveError::InvalidConfig(format!("line {}: expected `key = value`", lineno + 1)))?;
        let (key, value) = (key.trim().to_ascii_lowercase(), value.trim().to_string());
        match key.as_str() {
            "model" => {
                model = Some(match value.to_ascii_lowercase().as_str() {
                    "corr" => SimModel::Corr,
                    "hier" => SimModel::Hier,
                    other => return Err(RveError::InvalidConfig(format!("unknown model `{other}`"))),
                })
            }
            "m" => m = Some(parse_one::<usize>(&key, &value)?),
            "seed" => seed = Some(parse_one::<u64>(&key, &value)?),
            _ => rest.push((key, value)),
        }
    }
    let missing = |k: &str| RveError::InvalidConfig(format!("missing required key `{k}`"));
    let mut cfg = SimConfig::new(model.ok_or_else(|| missing("model"))?, m.ok_or_else(|| missing("m"))?, seed.ok_or_else(|| missing("seed"))?);
    for (key, value) in rest {
        match key.as_str() {
            "k" => {
                let ks: Vec<usize> = parse_list(&key, &value)?;
                cfg.k = match ks.as_slice() {
                    [k] => StudySizes::Fixed(*k),
                    _ => StudySizes::PerStudy(ks),
                };
            }
            "beta" => cfg.beta = parse_list(&key, &value)?,
            "tau_sq" => cfg.tau_sq = parse_one(&key, &value)?,
            "omega_sq" => cfg.omega_sq = parse_one(&key, &value)?,
            "rho" => cfg.rho = parse_one(&key, &value)?,
            "v" => {
                cfg.variance = match value.split_once(':') {
                    Some((a, b)) => VarianceGen::Uniform(parse_one(&key, a)?, parse_one(&key, b)?),
                    None => VarianceGen::Fixed(parse_one(&key, &value)?),
                }
            }
            "covariate" => {
                let lower = value.to_ascii_lowercase();
                cfg.covariate = match lower.split_once(':') {
                    Some(("skewed", p)) => CovariateGen::Skewed(parse_one(&key, p)?),
                    None if lower == "none" => CovariateGen::None,
                    None if lower == "balanced" => CovariateGen::Balanced,
                    None if lower == "normal" => CovariateGen::Normal,
                    _ => return Err(RveError::InvalidConfig(format!("unknown covariate `{value}`"))),
                };
            }
            "replications" => cfg.replications = parse_one(&key, &value)?,
            "variants" => {
                cfg.variants = value
                    .split(',')
                    .map(|s| match s.trim().to_ascii_lowercase().as_str() {
                        "large" => Ok(Variant::Large),
                        "small" => Ok(Variant::Small),
                        other => Err(RveError::InvalidConfig(format!("unknown variant `{other}`"))),
                    })
                    .collect::<Result<_>>()?;
            }
            "weights" => {
                cfg.weights = match value.to_ascii_lowercase().as_str() {
                    "estimated" => WeightSource::Estimated,
                    "oracle" => WeightSource::Oracle,
                    other => return Err(RveError::InvalidConfig(format!("unknown weights `{other}`"))),
                }
            }
            other => return Err(RveError::InvalidConfig(format!("unknown key `{other}`"))),
        }
    }
    if matches!(cfg.covariate, CovariateGen::None) && cfg.beta.len() == 2 {
        cfg.covariate = CovariateGen::Balanced;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The random generator for one replication: the configured seed with the
/// replication index as stream number, so streams never overlap.
pub fn replication_rng(seed: u64, replication: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replication as u64);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Draws one dataset with columns `study`, `es`, `v` and, when a covariate
/// is configured, `x`.
pub fn generate_dataset(config: &SimConfig, replication: usize) -> Result<Dataset> {
    config.validate()?;
    let mut rng = replication_rng(config.seed, replication);
    let sizes: Vec<usize> = (0..config.m).map(|j| config.study_size(j)).collect();
    let n: usize = sizes.iter().sum();

    let x: Option<Vec<f64>> = match config.covariate {
        CovariateGen::None => None,
        CovariateGen::Balanced => Some(
            sizes
                .iter()
                .enumerate()
                .flat_map(|(j, &k)| std::iter::repeat_n((j % 2) as f64, k))
                .collect(),
        ),
        CovariateGen::Skewed(p) => {
            let ones = ((p * n as f64).round() as usize).clamp(1, n - 1);
            let mut col = vec![0.0; n];
            for i in sample(&mut rng, n, ones) {
                col[i] = 1.0;
            }
            Some(col)
        }
        CovariateGen::Normal => Some((0..n).map(|_| normal(&mut rng)).collect()),
    };

    let mut study = Vec::with_capacity(n);
    let mut es = Vec::with_capacity(n);
    let mut var = Vec::with_capacity(n);
    let mut row = 0;
    for (j, &k) in sizes.iter().enumerate() {
        let u = config.tau_sq.sqrt() * normal(&mut rng);
        let shared = normal(&mut rng);
        for _ in 0..k {
            let v = match config.variance {
                VarianceGen::Fixed(v) => v,
                VarianceGen::Uniform(a, b) => rng.random_range(a..=b),
            };
            let mean = config.beta[0] + x.as_ref().map_or(0.0, |x| config.beta[1] * x[row]);
            let err = match config.model {
                SimModel::Corr => {
                    v.sqrt() * (config.rho.sqrt() * shared + (1.0 - config.rho).sqrt() * normal(&mut rng))
                }
                SimModel::Hier => config.omega_sq.sqrt() * normal(&mut rng) + v.sqrt() * normal(&mut rng),
            };
            study.push(Value::Cat(format!("s{}", j + 1)));
            es.push(Value::Num(mean + u + err));
            var.push(Value::Num(v));
            row += 1;
        }
    }
    let mut columns = vec![
        ("study".to_string(), study),
        ("es".to_string(), es),
        ("v".to_string(), var),
    ];
    if let Some(x) = x {
        columns.push(("x".to_string(), x.into_iter().map(Value::Num).collect()));
    }
    Dataset::from_columns(
        columns,
        Roles {
            study: "study".into(),
            effect: "es".into(),
            variance: "v".into(),
            user_weight: None,
        },
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefSummary {
    pub variant: Variant,
    pub coefficient: String,
    pub true_value: f64,
    pub coverage: f64,
    pub mean_estimate: f64,
    pub var_estimate: f64,
    pub mean_v_star: f64,
    pub mean_df: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub replications: usize,
    pub coefficients: Vec<CoefSummary>,
    pub mean_tau_sq: f64,
    pub mean_omega_sq: Option<f64>,
    pub runtime: Duration,
}

impl SimReport {
    pub fn get(&self, variant: Variant, coefficient: &str) -> Option<&CoefSummary> {
        self.coefficients
            .iter()
            .find(|c| c.variant == variant && c.coefficient == coefficient)
    }

    /// CSV with one row per (variant, coefficient); runtime is not included
    /// so equal configurations give equal bytes.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "variant,coefficient,true_value,replications,coverage,mean_estimate,var_estimate,mean_v_star,mean_df,mean_tau_sq,mean_omega_sq\n",
        );
        for c in &self.coefficients {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                c.variant.name(),
                c.coefficient,
                c.true_value,
                self.replications,
                c.coverage,
                c.mean_estimate,
                c.var_estimate,
                c.mean_v_star,
                c.mean_df,
                self.mean_tau_sq,
                self.mean_omega_sq.map_or(String::new(), |w| w.to_string()),
            );
        }
        s
    }
}

struct RepOutcome {
    /// Per variant, per coefficient: (estimate, V*_kk, df, covered).
    stats: Vec<Vec<(f64, f64, f64, bool)>>,
    tau_sq: f64,
    omega_sq: f64,
}

fn run_replication(config: &SimConfig, formula: &Formula, index: usize) -> Result<RepOutcome> {
    let ds = generate_dataset(config, index)?;
    let design = build_design(&ds, formula)?;
    let model = config.weight_model();
    let mut stats = Vec::with_capacity(config.variants.len());
    let mut tau_sq = 0.0;
    let mut omega_sq = 0.0;
    for &variant in &config.variants {
        let small = variant == Variant::Small;
        let coefs = match config.weights {
            WeightSource::Estimated => {
                let spec = ModelSpec::new(formula.clone(), model).rho(config.rho).small(small);
                let fit = fit_design(&design, &spec)?;
                if let Some(vc) = &fit.components {
                    tau_sq = vc.tau_sq;
                    omega_sq = vc.omega_sq.unwrap_or(0.0);
                }
                fit.coefficients
            }
            WeightSource::Oracle => {
                let w = match config.model {
                    SimModel::Corr => weights::corr_weights(&design.blocks, config.tau_sq),
                    SimModel::Hier => weights::hier_weights(&design.blocks, config.tau_sq, config.omega_sq),
                };
                tau_sq = config.tau_sq;
                omega_sq = config.omega_sq;
                infer_with_weights(&design, &w, small, 0.05)?.coefficients
            }
        };
        stats.push(
            coefs
                .iter()
                .zip(&config.beta)
                .map(|(c, &truth)| {
                    (
                        c.estimate,
                        c.std_err * c.std_err,
                        c.df,
                        c.ci_lower <= truth && truth <= c.ci_upper,
                    )
                })
                .collect(),
        );
    }
    Ok(RepOutcome {
        stats,
        tau_sq,
        omega_sq,
    })
}

/// Runs every replication (in parallel) and aggregates in replication order.
/// The first failing replication aborts the experiment.
pub fn run_experiment(config: &SimConfig) -> Result<SimReport> {
    config.validate()?;
    let start = Instant::now();
    let formula = config.formula();
    let outcomes = (0..config.replications)
        .into_par_iter()
        .map(|i| {
            run_replication(config, &formula, i).map_err(|e| RveError::Replication {
                index: i,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let r = config.replications as f64;
    let names: Vec<&str> = if config.beta.len() == 1 {
        vec!["intercept"]
    } else {
        vec!["intercept", "x"]
    };
    let mut coefficients = Vec::new();
    for (vi, &variant) in config.variants.iter().enumerate() {
        for (k, name) in names.iter().enumerate() {
            let est: Vec<f64> = outcomes.iter().map(|o| o.stats[vi][k].0).collect();
            let mean = est.iter().sum::<f64>() / r;
            let var = if config.replications > 1 {
                est.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (r - 1.0)
            } else {
                0.0
            };
            coefficients.push(CoefSummary {
                variant,
                coefficient: name.to_string(),
                true_value: config.beta[k],
                coverage: outcomes.iter().filter(|o| o.stats[vi][k].3).count() as f64 / r,
                mean_estimate: mean,
                var_estimate: var,
                mean_v_star: outcomes.iter().map(|o| o.stats[vi][k].1).sum::<f64>() / r,
                mean_df: outcomes.iter().map(|o| o.stats[vi][k].2).sum::<f64>() / r,
            });
        }
    }
    let report = SimReport {
        replications: config.replications,
        coefficients,
        mean_tau_sq: outcomes.iter().map(|o| o.tau_sq).sum::<f64>() / r,
        mean_omega_sq: (config.model == SimModel::Hier).then(|| outcomes.iter().map(|o| o.omega_sq).sum::<f64>() / r),
        runtime: start.elapsed(),
    };
    log::info!("simulation finished in {:?}", report.runtime);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_full_config() {
        let cfg = parse_config(
            "# example\nmodel = hier\nm = 12\nseed = 7\nk = 2,3\nbeta = 0.1, 0.2\ntau_sq = 0.1\nomega_sq=0.05\nv = 0.02:0.08\ncovariate = skewed:0.1\nreplications = 5\nvariants = small\nweights = oracle\n",
        );
        // k list length does not match m
        assert!(matches!(cfg, Err(RveError::InvalidConfig(_))));

        let cfg = parse_config("model = corr\nm = 10\nseed = 3\nbeta = 0, 0.5\ncovariate = normal\nrho = 0.6\n").unwrap();
        assert_eq!(cfg.model, SimModel::Corr);
        assert_eq!(cfg.covariate, CovariateGen::Normal);
        assert_eq!(cfg.rho, 0.6);
    }

    #[test]
    fn seed_is_required() {
        let err = parse_config("model = corr\nm = 10\n").unwrap_err();
        assert!(err.to_string().contains("seed"));
        assert!(parse_config("model = corr\nm = 10\nseed = 1\nfoo = 2\n").is_err());
    }

    #[test]
    fn skewed_has_exact_count() {
        let mut cfg = SimConfig::new(SimModel::Corr, 10, 5);
        cfg.covariate = CovariateGen::Skewed(0.1);
        cfg.beta = vec![0.0, 0.0];
        let ds = generate_dataset(&cfg, 0).unwrap();
        let x = ds.numeric("x").unwrap();
        assert_eq!(x.iter().filter(|&&v| v == 1.0).count(), 3);
    }

    #[test]
    fn deterministic_and_distinct_streams() {
        let cfg = SimConfig::new(SimModel::Hier, 5, 11);
        let a = generate_dataset(&cfg, 3).unwrap().to_csv_string();
        let b = generate_dataset(&cfg, 3).unwrap().to_csv_string();
        let c = generate_dataset(&cfg, 4).unwrap().to_csv_string();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
