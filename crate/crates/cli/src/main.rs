use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rve_core::{
    fit_model, format_fit, format_sensitivity, forest_from_model, parse_config, parse_csv, parse_formula, render_svg,
    run_experiment, sensitivity, CsvSchema, Dataset, ForestOptions, ModelSpec, RveError, WeightModel,
};

#[derive(Parser)]
#[command(name = "rve", version, about = "Robust variance estimation for meta-regression with dependent effect sizes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a meta-regression and print the coefficient report.
    Fit(ModelArgs),
    /// Refit a correlated effects model across rho = 0, 0.2, ..., 1.
    Sensitivity(ModelArgs),
    /// Fit the model and write a forest plot as SVG.
    Forest(ForestArgs),
    /// Run a Monte Carlo experiment described by a key = value config file.
    Sim(SimArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Corr,
    Hier,
    User,
}

impl From<ModelArg> for WeightModel {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Corr => WeightModel::Corr,
            ModelArg::Hier => WeightModel::Hier,
            ModelArg::User => WeightModel::User,
        }
    }
}

#[derive(Args)]
struct ModelArgs {
    /// Input CSV file.
    #[arg(long)]
    data: PathBuf,
    /// Model formula, e.g. "es ~ x1 + x2" or "es ~ 1".
    #[arg(long)]
    formula: String,
    /// Study identifier column.
    #[arg(long)]
    study: Option<String>,
    /// Sampling variance column.
    #[arg(long)]
    var: Option<String>,
    #[arg(long, value_enum, default_value = "corr")]
    model: ModelArg,
    /// Assumed within-study correlation for the correlated effects model.
    #[arg(long, default_value_t = 0.8)]
    rho: f64,
    /// Apply small-sample corrections (default).
    #[arg(long, overrides_with = "no_small")]
    small: bool,
    /// Use the large-sample estimator.
    #[arg(long = "no-small", overrides_with = "small")]
    no_small: bool,
    /// Column of user weights, required with --model user.
    #[arg(long)]
    userweights: Option<String>,
    /// Treat a numeric-looking column as categorical. Repeatable.
    #[arg(long = "factor")]
    factors: Vec<String>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Write output here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ForestArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Column holding study labels.
    #[arg(long = "study-lab")]
    study_lab: Option<String>,
    /// Column holding effect-size labels.
    #[arg(long = "es-lab")]
    es_lab: Option<String>,
    /// Extra column shown beside the plot; "Effect Size" and "Weight" show computed values. Repeatable.
    #[arg(long = "extra")]
    extra: Vec<String>,
}

#[derive(Args)]
struct SimArgs {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

struct CliError {
    context: &'static str,
    source: RveError,
}

trait Context<T> {
    fn context(self, context: &'static str) -> Result<T, CliError>;
}

impl<T, E: Into<RveError>> Context<T> for Result<T, E> {
    fn context(self, context: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError {
            context,
            source: e.into(),
        })
    }
}

impl ModelArgs {
    fn spec(&self) -> Result<ModelSpec, CliError> {
        let formula = parse_formula(&self.formula).context("formula")?;
        let spec = ModelSpec::new(formula, self.model.into())
            .rho(self.rho)
            .small(!self.no_small)
            .alpha(self.alpha);
        spec.validate().context("arguments")?;
        Ok(spec)
    }

    fn dataset(&self) -> Result<Dataset, CliError> {
        let mut schema = CsvSchema::new();
        schema.study = self.study.clone();
        schema.variance = self.var.clone();
        schema.user_weight = self.userweights.clone();
        schema.categorical = self.factors.clone();
        if let Some(lhs) = self.formula.split('~').next().map(str::trim).filter(|s| !s.is_empty()) {
            schema.effect = Some(lhs.to_string());
        }
        let file = fs::File::open(&self.data).context("data")?;
        parse_csv(file, &schema).context("data")
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => fs::write(path, text).context("output"),
        None => io::stdout().lock().write_all(text.as_bytes()).context("output"),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Fit(args) => {
            let spec = args.spec()?;
            let ds = args.dataset()?;
            let fit = fit_model(&ds, &spec).context("fit")?;
            for c in fit.coefficients.iter().filter(|c| c.df_warning) {
                log::warn!("df for {} is {:.2}; do not trust its inference", c.name, c.df);
            }
            emit(args.out.as_deref(), &format_fit(&fit))
        }
        Command::Sensitivity(args) => {
            let spec = args.spec()?;
            let ds = args.dataset()?;
            let table = sensitivity(&ds, &spec).context("sensitivity")?;
            emit(args.out.as_deref(), &format_sensitivity(&table))
        }
        Command::Forest(args) => {
            let spec = args.model.spec()?;
            let ds = args.model.dataset()?;
            let opts = ForestOptions {
                study_label: args.study_lab,
                es_label: args.es_lab,
                extra_columns: args.extra,
            };
            let layout = forest_from_model(&ds, &spec, &opts).context("forest")?;
            emit(args.model.out.as_deref(), &render_svg(&layout))
        }
        Command::Sim(args) => {
            let text = fs::read_to_string(&args.config).context("config")?;
            let config = parse_config(&text).context("config")?;
            let report = run_experiment(&config).context("simulation")?;
            log::info!("runtime {:.2?}", report.runtime);
            emit(args.out.as_deref(), &report.to_csv())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.context, e.source);
            ExitCode::FAILURE
        }
    }
}
