//! `qmoe` — train and query battery remaining-useful-life models from the
//! command line.
//!
//! Subcommands:
//! - `train`: two-stage training on a labeled cell file; writes the model
//!   and a per-epoch loss report
//! - `predict`: per-cell quantiles, gate weights, median, and 90% interval
//! - `survival`: survival and cdf probabilities at a cycle threshold
//! - `evaluate`: point metrics and interval coverage, per chemistry and
//!   overall
//! - `synth`: synthetic dataset generation with a printed ground-truth law
//! - `plotdata`: a 1,000-point pdf/cdf/survival grid for one cell
//!
//! Every command is deterministic given its inputs, the config, and
//! `--seed`; outputs are written atomically (temp file + rename) and input
//! files are never modified. All tabular output is CSV: header row, comma
//! delimiter, `.` decimal separator, UTF-8, LF line endings.
//!
//! Exit codes are a stable scripting contract: 0 success, 1 validation
//! error (bad flags, config, paths, or input files), 2 runtime error (I/O
//! or numerical failure mid-run). Errors print to stderr as
//! `error[validation]: ...` or `error[runtime]: ...`.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Error carrying its exit-code category; every failure in the binary is
/// funneled into one of the two classes the scripting contract promises.
#[derive(Debug)]
pub(crate) enum CliError {
    /// Caller mistake: flags, config file, paths, or input content. Exit 1.
    Validation(String),
    /// Failure while doing the work: I/O or numerics. Exit 2.
    Runtime(String),
}

impl CliError {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    pub(crate) fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }
}

impl From<qmoe::Error> for CliError {
    fn from(e: qmoe::Error) -> Self {
        match &e {
            // Failures of the machinery while working.
            qmoe::Error::Io(_) | qmoe::Error::NonFinite { .. } | qmoe::Error::Training(_) => {
                CliError::Runtime(e.to_string())
            }
            // Everything else describes a problem with what the caller
            // supplied: shapes, parameters, file contents, model files.
            _ => CliError::Validation(e.to_string()),
        }
    }
}

pub(crate) type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "qmoe",
    version,
    about = "Probabilistic battery remaining-useful-life prediction",
    propagate_version = true
)]
struct Cli {
    /// Master random seed; overrides the config file's seed and, for
    /// `synth`, the seed embedded in the spec.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Print per-cell and per-stage detail to stdout.
    #[arg(long, global = true)]
    verbose: bool,

    /// Flat key=value config file; `#` lines are comments, unknown keys are
    /// rejected.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a labeled cell file; writes model.qmoe and train_report.csv.
    Train {
        /// Labeled cells, one JSON record per line (falls back to `data=`
        /// in the config).
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        /// Output directory (falls back to `out_dir=` in the config).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Per-cell quantiles, gate weights, median, and 90% interval bounds.
    Predict {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        /// Cells to predict, one JSON record per line.
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        /// Output CSV path.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Comma-separated quantile levels to emit (default: all stored
        /// levels). Each must be stored in the model.
        #[arg(long, value_name = "LIST")]
        quantiles: Option<String>,
    },
    /// Probability of surviving past a cycle threshold, per cell.
    Survival {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        /// Cycle threshold y for S(y) = P(RUL > y).
        #[arg(long, value_name = "CYCLES")]
        threshold: f64,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Point metrics and 90%-interval coverage, per chemistry plus ALL.
    Evaluate {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        /// Labeled cells to score against.
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Generate a synthetic dataset and print its ground-truth label law.
    Synth {
        /// JSON generation spec (default: the built-in five-chemistry demo).
        #[arg(long, value_name = "PATH")]
        spec: Option<PathBuf>,
        /// Output cell file, one JSON record per line.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Emit (y, pdf, cdf, survival) rows on a 1,000-point grid for one cell.
    Plotdata {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        /// Cell id to plot (must appear in the input file).
        #[arg(long, value_name = "ID")]
        cell: String,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            // Usage mistakes are validation errors; fold clap's own
            // "error: " lead-in into the category prefix.
            let msg = e.to_string();
            let msg = msg.strip_prefix("error: ").unwrap_or(&msg);
            eprint!("error[validation]: {msg}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error[validation]: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error[runtime]: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(path) => {
            commands::require_file(path, "config file")?;
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::runtime(format!("reading {}: {e}", path.display())))?;
            config::parse_run_config(&text, &path.display().to_string())?
        }
        None => config::RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    match cli.command {
        Command::Train { data, out } => commands::cmd_train(&cfg, data, out, cli.verbose),
        Command::Predict {
            model,
            input,
            out,
            quantiles,
        } => commands::cmd_predict(&cfg, &model, &input, &out, quantiles.as_deref()),
        Command::Survival {
            model,
            input,
            threshold,
            out,
        } => commands::cmd_survival(&cfg, &model, &input, threshold, &out, cli.verbose),
        Command::Evaluate { model, data, out } => commands::cmd_evaluate(&cfg, &model, &data, &out),
        Command::Synth { spec, out } => commands::cmd_synth(spec.as_deref(), &out, cli.seed),
        Command::Plotdata {
            model,
            input,
            cell,
            out,
        } => commands::cmd_plotdata(&cfg, &model, &input, &cell, &out),
    }
}
