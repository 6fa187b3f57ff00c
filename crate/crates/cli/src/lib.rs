//! Experiment runner: estimator benchmarks, disparity and shutdown sweeps,
//! VAE training and metric reports, all written as CSV.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;

use std::ffi::OsString;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use tcorr::estimators::Method;
use tcorr::metrics::{Use, DEFAULT_BINS};
use tcorr::vae::{
    ObjectiveKind, DEFAULT_DATASET_SEED, DEFAULT_FACTORS, DEFAULT_LEVELS, DEFAULT_OBS_DIM,
};

use commands::{BenchParams, CsvRow, DisparityParams, MetricsParams, ShutdownParams, TrainParams};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] tcorr::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("output: {0}")]
    Output(#[from] io::Error),
    #[error(transparent)]
    Args(#[from] clap::Error),
    #[error("config {path}, line {line}: {msg}")]
    Config {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "tcorr",
    version,
    about = "Total-correlation experiments with CSV output"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Minibatch estimators against the closed form over a determinant grid.
    EstimatorBench(BenchArgs),
    /// Mean/sample TC disparity on constructed 2-D instances.
    DisparityDemo(DisparityArgs),
    /// Minibatch estimates at zero TC as mean dimensions shut down.
    ShutdownDemo(ShutdownArgs),
    /// Train the toy VAE on the synthetic factor dataset.
    Train(TrainArgs),
    /// TC, SAP, MIG and pair statistics for a latent dump.
    Metrics(MetricsArgs),
}

/// Key=value file whose entries act as defaults for the subcommand's flags.
#[derive(Args, Debug)]
pub struct ConfigArg {
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
}

fn parse_seeds(s: &str) -> std::result::Result<Vec<u64>, String> {
    match s.split_once("..") {
        Some((a, b)) => {
            let a: u64 = a.trim().parse().map_err(|e| format!("{s}: {e}"))?;
            let b: u64 = b.trim().parse().map_err(|e| format!("{s}: {e}"))?;
            if a >= b {
                return Err(format!("empty seed range {s}"));
            }
            Ok((a..b).collect())
        }
        None => s
            .trim()
            .parse()
            .map(|v| vec![v])
            .map_err(|e| format!("{s}: {e}")),
    }
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: tcorr::Error| e.to_string())
}

fn parse_objective(s: &str) -> std::result::Result<ObjectiveKind, String> {
    s.parse().map_err(|e: tcorr::Error| e.to_string())
}

fn parse_use(s: &str) -> std::result::Result<Use, String> {
    s.parse().map_err(|e: tcorr::Error| e.to_string())
}

fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    s.trim().parse().map_err(|e| format!("{s}: {e}"))
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Latent dimensions.
    #[arg(long, value_delimiter = ',', default_value = "2,3,5,10")]
    pub dims: Vec<usize>,
    /// Determinants of the mean correlation matrix, each in (0, 1].
    #[arg(long, value_delimiter = ',', value_parser = parse_f64,
          default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")]
    pub dets: Vec<f64>,
    #[arg(long, default_value_t = 512)]
    pub batch_size: usize,
    /// Dataset size N; defaults to 4 × batch size.
    #[arg(long)]
    pub dataset_size: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub sigma_prime: f64,
    /// Seeds as a list and/or half-open ranges, e.g. `0..10` or `1,2,7`.
    #[arg(long, value_delimiter = ',', value_parser = parse_seeds, default_value = "0..10")]
    pub seeds: Vec<Vec<u64>>,
    #[arg(long, value_delimiter = ',', value_parser = parse_method, default_value = "naive-mc,mws,mss0,mss1")]
    pub estimator: Vec<Method>,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Args, Debug)]
pub struct DisparityArgs {
    /// Target TC of the means; `inf` selects the singular instance.
    #[arg(long, value_delimiter = ',', value_parser = parse_f64, default_value = "0,1,2,4,8,16,inf")]
    pub targets: Vec<f64>,
    /// Conditional standard deviations of the two dimensions.
    #[arg(long, value_delimiter = ',', num_args = 1.., default_value = "0.1,0.1")]
    pub sigma_prime: Vec<f64>,
    /// Draws per instance for the empirical columns.
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, value_delimiter = ',', value_parser = parse_seeds, default_value = "0")]
    pub seeds: Vec<Vec<u64>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Args, Debug)]
pub struct ShutdownArgs {
    #[arg(long, default_value_t = 10)]
    pub dims: usize,
    #[arg(long, default_value_t = 512)]
    pub batch_size: usize,
    #[arg(long)]
    pub dataset_size: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub sigma_prime: f64,
    /// Standard deviations of the shut-down mean dimensions.
    #[arg(long, value_delimiter = ',', value_parser = parse_f64, default_value = "0.001")]
    pub sigma0: Vec<f64>,
    /// Largest number of shut-down dimensions; defaults to D − 1.
    #[arg(long)]
    pub max_shutdown: Option<usize>,
    #[arg(long, value_delimiter = ',', value_parser = parse_seeds, default_value = "0..10")]
    pub seeds: Vec<Vec<u64>>,
    #[arg(long, value_delimiter = ',', value_parser = parse_method, default_value = "naive-mc,mws,mss0,mss1")]
    pub estimator: Vec<Method>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_objective, default_value = "rtc")]
    pub objective: ObjectiveKind,
    #[arg(long, default_value_t = 6.0)]
    pub beta: f64,
    /// Initial variance-penalty weight; defaults to max(10, β).
    #[arg(long)]
    pub eta_init: Option<f64>,
    /// Target band `low,high` for the mean posterior variance trace.
    #[arg(long, value_delimiter = ',', value_parser = parse_f64, num_args = 1..)]
    pub eta_window: Option<Vec<f64>>,
    /// TC estimator used inside the objective.
    #[arg(long, value_parser = parse_method)]
    pub estimator: Option<Method>,
    /// Off-diagonal DIP weight (DIP objectives only).
    #[arg(long, default_value_t = 1.0)]
    pub lambda_od: f64,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub hidden_width: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_FACTORS)]
    pub factors: usize,
    #[arg(long, default_value_t = DEFAULT_LEVELS)]
    pub levels: usize,
    #[arg(long, default_value_t = DEFAULT_OBS_DIM)]
    pub obs_dim: usize,
    #[arg(long, default_value_t = DEFAULT_DATASET_SEED)]
    pub dataset_seed: u64,
    #[arg(long, value_delimiter = ',', value_parser = parse_seeds, default_value = "1")]
    pub seeds: Vec<Vec<u64>>,
    /// Output directory.
    #[arg(long, default_value = "tcorr-train")]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    /// Latent dump CSV (factor_k, mu_j, sigma_j, z_j columns).
    pub dump: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long = "use", value_parser = parse_use, default_value = "means")]
    pub which: Use,
    /// Output directory.
    #[arg(long, default_value = "tcorr-metrics")]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArg,
}

fn flatten_seeds(seeds: &[Vec<u64>]) -> Vec<u64> {
    seeds.iter().flatten().copied().collect()
}

fn emit<R: CsvRow>(out: Option<&Path>, rows: &[R]) -> Result<()> {
    match out {
        Some(path) => commands::write_csv_file(path, rows),
        None => commands::write_csv(io::stdout().lock(), rows),
    }
}

/// Read a `key = value` config into `--key value` pairs; `#` starts a comment.
pub fn read_config(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Config {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "expected key = value".into(),
            });
        };
        let key = k.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() || key == "config" {
            return Err(CliError::Config {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("invalid key '{}'", k.trim()),
            });
        }
        pairs.push((key, v.trim().to_string()));
    }
    Ok(pairs)
}

fn flag_name(arg: &str) -> Option<&str> {
    let name = arg.strip_prefix("--")?;
    Some(name.split_once('=').map_or(name, |(n, _)| n))
}

/// Expand `--config <path>`: entries are inserted after the subcommand name
/// unless the same flag is given on the command line.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut rest = Vec::with_capacity(args.len());
    let mut config = None;
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy().into_owned();
        if s == "--config" {
            let path = it
                .next()
                .ok_or_else(|| CliError::Usage("--config needs a path".into()))?;
            config = Some(PathBuf::from(path));
        } else if let Some(p) = s.strip_prefix("--config=") {
            config = Some(PathBuf::from(p));
        } else {
            rest.push(a);
        }
    }
    let Some(path) = config else {
        return Ok(rest);
    };
    let given: Vec<String> = rest
        .iter()
        .filter_map(|a| flag_name(&a.to_string_lossy()).map(str::to_owned))
        .collect();
    let Some(sub) = rest
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
    else {
        return Err(CliError::Usage("--config needs a subcommand".into()));
    };
    let insert_at = sub + 2;
    let mut extra = Vec::new();
    for (k, v) in read_config(&path)? {
        if !given.contains(&k) {
            extra.push(OsString::from(format!("--{k}")));
            extra.push(OsString::from(v));
        }
    }
    rest.splice(insert_at..insert_at, extra);
    Ok(rest)
}

/// Parse (after config expansion) and run.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args = expand_config(args.into_iter().map(Into::into).collect())?;
    let cli = Cli::try_parse_from(args)?;
    run(cli)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::EstimatorBench(a) => {
            let rows = commands::estimator_bench(&BenchParams {
                dims: a.dims,
                dets: a.dets,
                batch_size: a.batch_size,
                dataset_size: a.dataset_size.unwrap_or(4 * a.batch_size),
                sigma_prime: a.sigma_prime,
                seeds: flatten_seeds(&a.seeds),
                methods: a.estimator,
            })?;
            emit(a.out.as_deref(), &rows)
        }
        Command::DisparityDemo(a) => {
            let sigma_prime: [f64; 2] = match a.sigma_prime[..] {
                [s] => [s, s],
                [s, t] => [s, t],
                _ => {
                    return Err(CliError::Usage(
                        "--sigma-prime takes one or two values".into(),
                    ))
                }
            };
            let rows = commands::disparity_demo(&DisparityParams {
                targets: a.targets,
                sigma_prime,
                samples: a.samples,
                seeds: flatten_seeds(&a.seeds),
            })?;
            emit(a.out.as_deref(), &rows)
        }
        Command::ShutdownDemo(a) => {
            let rows = commands::shutdown_demo(&ShutdownParams {
                dim: a.dims,
                batch_size: a.batch_size,
                dataset_size: a.dataset_size.unwrap_or(4 * a.batch_size),
                sigma_prime: a.sigma_prime,
                sigma0: a.sigma0,
                max_shutdown: a.max_shutdown.unwrap_or(a.dims.saturating_sub(1)),
                seeds: flatten_seeds(&a.seeds),
                methods: a.estimator,
            })?;
            emit(a.out.as_deref(), &rows)
        }
        Command::Train(a) => {
            let mut config = commands::objective_config(a.objective, a.beta, a.lambda_od);
            if let Some(v) = a.eta_init {
                config.eta_init = v;
            }
            if let Some(w) = a.eta_window {
                let [lo, hi] = w[..] else {
                    return Err(CliError::Usage("--eta-window takes low,high".into()));
                };
                config.eta_window = (lo, hi);
            }
            if let Some(m) = a.estimator {
                config.tc_estimator = m;
            }
            if let Some(v) = a.batch_size {
                config.batch_size = v;
            }
            if let Some(v) = a.epochs {
                config.epochs = v;
            }
            if let Some(v) = a.step_size {
                config.step_size = v;
            }
            if let Some(v) = a.latent_dim {
                config.latent_dim = v;
            }
            if let Some(v) = a.hidden_width {
                config.hidden_width = v;
            }
            let summaries = commands::train_runs(&TrainParams {
                config,
                factors: a.factors,
                levels: a.levels,
                obs_dim: a.obs_dim,
                dataset_seed: a.dataset_seed,
                seeds: flatten_seeds(&a.seeds),
                out: a.out,
            })?;
            commands::write_csv(io::stdout().lock(), &summaries)
        }
        Command::Metrics(a) => {
            let report = commands::metrics_report(&MetricsParams {
                dump: a.dump,
                bins: a.bins,
                which: a.which,
                out: a.out,
            })?;
            commands::write_csv(io::stdout().lock(), &report.summary)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_accept_values_and_ranges() {
        assert_eq!(parse_seeds("7"), Ok(vec![7]));
        assert_eq!(parse_seeds("2..5"), Ok(vec![2, 3, 4]));
        assert!(parse_seeds("5..5").is_err());
        assert!(parse_seeds("x").is_err());
        let cli = Cli::try_parse_from(["tcorr", "estimator-bench", "--seeds", "0..2,9"]).unwrap();
        let Command::EstimatorBench(a) = cli.command else {
            panic!()
        };
        assert_eq!(flatten_seeds(&a.seeds), vec![0, 1, 9]);
    }

    #[test]
    fn flag_names_strip_values() {
        assert_eq!(flag_name("--dims=3"), Some("dims"));
        assert_eq!(flag_name("--dims"), Some("dims"));
        assert_eq!(flag_name("3"), None);
    }
}
