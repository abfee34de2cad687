use std::path::PathBuf;
use std::str::FromStr;

use cgct::allocation::{Budget, DEFAULT_MAX_ITERATIONS};
use cgct::data::DEFAULT_KNN_K;
use cgct::pipeline::Method;
use clap::{Args, Parser, Subcommand};

pub const DEFAULT_DATA: &str = "data/hiv_panel.csv";
pub const DEFAULT_MODEL: &str = "model.json";
pub const DEFAULT_BIND: &str = "127.0.0.1:8080";
pub const DEFAULT_MAX_POINTS: usize = 1025;
pub const DEFAULT_BODY_LIMIT: usize = 64 * 1024;

#[derive(Debug, Parser)]
#[command(name = "cgct", version, about = "Aid-response curves and budget allocation")]
pub struct Cli {
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Log filter for stderr (error, warn, info, debug).
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load and impute the panel, report column statistics.
    Ingest(IngestArgs),
    /// Train a model and save it as JSON.
    Train(TrainArgs),
    /// Repeated-run evaluation (semi-synthetic sqrt-MISE or factual RMSE).
    Evaluate(EvaluateArgs),
    /// Response curves of one or all countries as CSV.
    Curves(CurvesArgs),
    /// Budget-constrained aid allocation.
    Allocate(AllocateArgs),
    /// Ablation matrix over stages and outcome models.
    Ablation(AblationArgs),
    /// HTTP/JSON service.
    Serve(ServeArgs),
}

impl Command {
    /// Stage reported when a failure carries no stage of its own.
    pub fn stage(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "data",
            Command::Train(_) => "training",
            Command::Evaluate(_) | Command::Ablation(_) => "evaluation",
            Command::Curves(_) => "prediction",
            Command::Allocate(_) => "allocation",
            Command::Serve(_) => "service",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Panel CSV.
    #[arg(long, env = "CGCT_DATA", default_value = DEFAULT_DATA)]
    pub data: PathBuf,
    /// Neighbours for covariate imputation.
    #[arg(long, default_value_t = DEFAULT_KNN_K)]
    pub knn: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    #[arg(long, default_value = "cgct", value_parser = parse_method)]
    pub method: Method,
    /// JSON method configuration replacing the method's defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the autoencoder stage (true/false).
    #[arg(long)]
    pub bae: Option<bool>,
    /// Override counterfactual generation (true/false).
    #[arg(long)]
    pub cfgen: Option<bool>,
    /// Override autoencoder training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override generated counterfactuals per unit.
    #[arg(long)]
    pub m: Option<usize>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Restrict to one year.
    #[arg(long)]
    pub year: Option<i32>,
    /// Write the imputed panel to this CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Training year; repeat to pool several years.
    #[arg(long, default_value = "2016")]
    pub year: Vec<i32>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Tune on a seeded sample of this many grid points before training.
    #[arg(long)]
    pub tune: Option<usize>,
    #[arg(long, default_value = DEFAULT_MODEL)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Score against generated ground-truth curves (sqrt-MISE).
    #[arg(long)]
    pub semi_synthetic: bool,
    #[arg(long, default_value_t = 2016)]
    pub train_year: i32,
    #[arg(long, default_value_t = 2017)]
    pub eval_year: i32,
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the ground-truth sidecar JSON (semi-synthetic only).
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CurvesArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Model file; repeat for an ensemble (mean and std across models).
    #[arg(long, default_value = DEFAULT_MODEL)]
    pub model: Vec<PathBuf>,
    /// Country code; all countries when omitted.
    #[arg(long)]
    pub country: Option<String>,
    /// Year whose covariates define the curves.
    #[arg(long, default_value_t = 2017)]
    pub year: i32,
    #[arg(long, default_value_t = 65)]
    pub points: usize,
    /// Lower end of the grid, USD millions.
    #[arg(long)]
    pub min: Option<f64>,
    /// Upper end of the grid, USD millions (defaults to the model bound).
    #[arg(long)]
    pub max: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AllocateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = DEFAULT_MODEL)]
    pub model: PathBuf,
    /// Decision year.
    #[arg(long, default_value_t = 2017)]
    pub year: i32,
    /// Year supplying incidence rates (defaults to the year before).
    #[arg(long)]
    pub previous_year: Option<i32>,
    /// `observed-total` or an amount in USD millions.
    #[arg(long, default_value = "observed-total", value_parser = parse_budget)]
    pub budget: Budget,
    /// Fixed allocation, `COUNTRY=USD_MILLIONS`; repeatable.
    #[arg(long, value_parser = parse_pin)]
    pub pin: Vec<(String, f64)>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERATIONS)]
    pub max_iterations: usize,
    #[arg(long, default_value_t = 1e-10)]
    pub tolerance: f64,
    /// Bootstrap resamples of the training countries (refits the model's configuration).
    #[arg(long, num_args = 0..=1, default_missing_value = "100")]
    pub bootstrap: Option<usize>,
    /// Training year for bootstrap refits (defaults to the model's years).
    #[arg(long)]
    pub train_year: Option<i32>,
    /// Write the plan CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 2016)]
    pub train_year: i32,
    #[arg(long, default_value_t = 2017)]
    pub eval_year: i32,
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Outcome models (columns); repeatable.
    #[arg(long = "inference", default_values = ["drnet", "ann", "lm", "gps"])]
    pub inference: Vec<String>,
    /// Override autoencoder training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Model file; endpoints needing it answer 503 when it cannot be loaded.
    #[arg(long, default_value = DEFAULT_MODEL)]
    pub model: PathBuf,
    /// Year whose countries are served.
    #[arg(long, default_value_t = 2017)]
    pub year: i32,
    /// Year supplying incidence rates (defaults to the year before).
    #[arg(long)]
    pub previous_year: Option<i32>,
    #[arg(long, env = "CGCT_BIND", default_value = DEFAULT_BIND)]
    pub bind: String,
    /// Allowed CORS origin; repeatable, `*` allows any.
    #[arg(long)]
    pub cors_origin: Vec<String>,
    /// Iteration cap of /api/allocate.
    #[arg(long, default_value_t = DEFAULT_MAX_ITERATIONS)]
    pub max_iterations: usize,
    /// Largest grid accepted by /api/curve.
    #[arg(long, default_value_t = DEFAULT_MAX_POINTS)]
    pub max_points: usize,
    /// Largest request body in bytes.
    #[arg(long, default_value_t = DEFAULT_BODY_LIMIT)]
    pub body_limit: usize,
    /// Seed of the allocation multi-start.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn parse_method(s: &str) -> Result<Method, String> {
    Method::from_str(s).map_err(|e| e.to_string())
}

pub fn parse_budget(s: &str) -> Result<Budget, String> {
    match s {
        "observed-total" | "observed_total" => Ok(Budget::ObservedTotal),
        _ => {
            let v: f64 = s
                .parse()
                .map_err(|_| format!("budget must be 'observed-total' or a number, got '{s}'"))?;
            if v.is_finite() && v > 0.0 {
                Ok(Budget::Amount(v))
            } else {
                Err(format!("budget must be positive, got {v}"))
            }
        }
    }
}

pub fn parse_pin(s: &str) -> Result<(String, f64), String> {
    let (id, v) = s.split_once('=').ok_or_else(|| format!("pin must be COUNTRY=VALUE, got '{s}'"))?;
    let v: f64 = v.parse().map_err(|_| format!("pin value '{v}' is not a number"))?;
    if id.is_empty() || !v.is_finite() {
        return Err(format!("invalid pin '{s}'"));
    }
    Ok((id.to_string(), v))
}
