//! `rsd`: simulate call records, fit quarters, build priors, run the daily
//! prediction loop and summarize the results.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod pipeline;
mod report;

#[derive(Parser)]
#[command(name = "rsd", version, about = "Bayesian daily response-propensity prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic quarters with known coefficients.
    Simulate(SimulateArgs),
    /// Fit the logit hazard model to each quarter by maximum likelihood.
    Fit(FitArgs),
    /// Build a prior from fits, literature estimates or defaults.
    Prior {
        #[command(subcommand)]
        method: PriorCommand,
    },
    /// Daily posterior predictions for one quarter, scored against the
    /// end-of-quarter benchmark.
    RunQuarter(RunQuarterArgs),
    /// Window summaries of eval files as JSON.
    Summarize(SummarizeArgs),
    /// Long-format plot data and window tables from eval files.
    Report(ReportArgs),
    /// Run simulate, fit, prior, run-quarter, summarize and report from one
    /// experiment file.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Full simulator configuration (JSON). Without it the desk preset is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub quarters: Option<usize>,
    #[arg(long)]
    pub cases: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Case-level response rate the intercept is calibrated to.
    #[arg(long)]
    pub target_rr: Option<f64>,
    /// Turn off intercept calibration.
    #[arg(long, conflicts_with = "target_rr")]
    pub no_calibration: bool,
    /// Per-quarter sd of coefficient drift.
    #[arg(long)]
    pub drift: Option<f64>,
    /// Output directory for calls.csv, schema.json, truth.json and
    /// truth_propensity.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct DataArgs {
    /// Call-record CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Covariate schema JSON.
    #[arg(long)]
    pub schema: PathBuf,
    /// Accept columns that the schema does not name.
    #[arg(long)]
    pub ignore_extra: bool,
    #[arg(long, default_value_t = 84)]
    pub quarter_length: u32,
}

#[derive(Args)]
#[group(id = "fit_target", required = true, multiple = false, args = ["out", "out_dir"])]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Quarters to fit (repeatable); all quarters by default.
    #[arg(long = "quarter")]
    pub quarters: Vec<i64>,
    /// Output file when a single quarter is fitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory receiving one `fit_q<quarter>.json` per quarter.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Also write Nagelkerke R², AUC and Hosmer-Lemeshow statistics.
    #[arg(long)]
    pub stats_out: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub hl_groups: usize,
    /// Seed to record; defaults to the one in the data file.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct PriorOut {
    #[arg(long)]
    pub out: PathBuf,
    /// Seed to record; defaults to the one shared by the input fits.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand)]
pub enum PriorCommand {
    /// Zero mean with a large common variance.
    Standard {
        #[arg(long, required_unless_present = "dim", conflicts_with = "dim")]
        schema: Option<PathBuf>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long, default_value_t = rsd_core::priors::STANDARD_VARIANCE)]
        variance: f64,
        #[command(flatten)]
        out: PriorOut,
    },
    /// Precision-weighted pooling of earlier quarters.
    Pwp {
        /// Fit files of the prior quarters.
        #[arg(required = true)]
        fits: Vec<PathBuf>,
        #[arg(long, default_value_t = rsd_core::priors::DEFAULT_RIDGE_LAMBDA)]
        lambda: f64,
        /// Comma-separated per-quarter weights, in the order of the fits.
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
        #[command(flatten)]
        out: PriorOut,
    },
    /// The most recent quarter's estimate with its full covariance.
    Last {
        fit: PathBuf,
        #[command(flatten)]
        out: PriorOut,
    },
    /// The most recent quarter's estimate with covariances set to zero.
    Lastz {
        fit: PathBuf,
        #[command(flatten)]
        out: PriorOut,
    },
    /// Pooled literature estimates from a crosswalk CSV.
    Lit {
        #[arg(long)]
        crosswalk: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        fallback_mean: f64,
        #[arg(long, default_value_t = 10.0)]
        fallback_variance: f64,
        #[command(flatten)]
        out: PriorOut,
    },
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Profile {
    /// 5000 retained draws.
    Full,
    /// 1000 retained draws.
    Desk,
}

#[derive(Args)]
pub struct McmcArgs {
    /// Master seed; defaults to the seed in the data file, else 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Tuning loops.
    #[arg(long, default_value_t = 100)]
    pub tune: usize,
    /// Proposals per tuning loop.
    #[arg(long, default_value_t = 50)]
    pub tune_len: usize,
    #[arg(long, default_value_t = 1000)]
    pub burn_in: usize,
    /// Retained draws; overrides the profile.
    #[arg(long)]
    pub draws: Option<usize>,
    #[arg(long, value_enum, default_value_t = Profile::Full)]
    pub profile: Profile,
    #[arg(long, default_value_t = 0.234)]
    pub target_accept: f64,
}

#[derive(Args)]
pub struct RunQuarterArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Quarter to evaluate; may be omitted when the data hold one quarter.
    #[arg(long)]
    pub quarter: Option<i64>,
    #[arg(long)]
    pub prior: PathBuf,
    #[command(flatten)]
    pub mcmc: McmcArgs,
    #[arg(long, default_value_t = 7)]
    pub start_day: u32,
    #[arg(long)]
    pub end_day: Option<u32>,
    /// Fit day d on attempts before day d only.
    #[arg(long)]
    pub exclude_current_day: bool,
    /// Worker threads; output does not depend on this.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Eval CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-attempt predictions, benchmarks and differences.
    #[arg(long)]
    pub predictions_out: Option<PathBuf>,
    /// End-of-quarter benchmark fit.
    #[arg(long)]
    pub benchmark_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct WindowArgs {
    #[arg(long, default_value = "7-30,31-60,61-84")]
    pub windows: String,
    #[arg(long, default_value_t = 84)]
    pub quarter_length: u32,
}

#[derive(Args)]
pub struct SummarizeArgs {
    #[arg(required = true)]
    pub evals: Vec<PathBuf>,
    #[command(flatten)]
    pub windows: WindowArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ReportArgs {
    #[arg(required = true)]
    pub evals: Vec<PathBuf>,
    #[command(flatten)]
    pub windows: WindowArgs,
    /// Long-format `method,quarter,day,bias,se,rmse`.
    #[arg(long)]
    pub plot_out: PathBuf,
    /// One row per eval file and window.
    #[arg(long)]
    pub windows_out: PathBuf,
}

#[derive(Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the output directory of the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the worker count of the config.
    #[arg(long)]
    pub jobs: Option<usize>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::Prior { method } => commands::prior(&method),
        Command::RunQuarter(a) => commands::run_quarter(&a),
        Command::Summarize(a) => commands::summarize(&a),
        Command::Report(a) => commands::report(&a),
        Command::Pipeline(a) => pipeline::run(&a),
    }
}

/// One line on stderr: `rsd: error kind=<kind> [line=.. column=..] message="..."`.
fn error_line(err: &anyhow::Error) -> String {
    use rsd_core::Error as E;
    let core = err.chain().find_map(|e| e.downcast_ref::<E>());
    let (kind, position) = match core {
        Some(E::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => {
            ("file_not_found", None)
        }
        Some(E::Io { .. }) => ("io_error", None),
        Some(E::Parse { line, column, .. }) => ("parse_error", Some((*line, *column))),
        Some(E::SchemaFingerprintMismatch { .. }) => ("schema_fingerprint_mismatch", None),
        Some(E::SchemaMismatch(_)) => ("schema_mismatch", None),
        Some(E::InvalidConfig(_)) => ("invalid_config", None),
        Some(E::InvalidSchema(_)) => ("invalid_schema", None),
        Some(E::InvalidRecord(_)) => ("invalid_record", None),
        Some(E::NonPositiveDefinite(_) | E::NonPositiveDefinitePrior) => ("non_positive_definite", None),
        Some(E::CalibrationFailed(_)) => ("calibration_failed", None),
        Some(E::DegenerateData(_)) => ("degenerate_data", None),
        Some(E::DimensionMismatch { .. }) => ("dimension_mismatch", None),
        Some(E::Json(_)) => ("parse_error", None),
        Some(E::Csv(_)) => ("parse_error", None),
        Some(_) => ("invalid_input", None),
        None => ("error", None),
    };
    let message = format!("{err:#}");
    let quoted = serde_json::to_string(&message).unwrap_or_else(|_| "\"?\"".into());
    match position {
        Some((line, column)) => {
            format!("rsd: error kind={kind} line={line} column={column} message={quoted}")
        }
        None => format!("rsd: error kind={kind} message={quoted}"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RSD_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", error_line(&err));
            ExitCode::FAILURE
        }
    }
}
