use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use config::ModelFlags;

/// Train and evaluate deep graph memory networks for knowledge tracing.
#[derive(Parser, Debug)]
#[command(name = "dgmn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Generate a synthetic data set and its ground truth
    Gen {
        #[arg(long, default_value_t = 100)]
        students: usize,
        #[arg(long, default_value_t = 50)]
        questions: usize,
        #[arg(long, default_value_t = 5)]
        concepts: usize,
        #[arg(long, default_value_t = 50)]
        seq_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Triple-line output file; ground truth goes to `<out>.truth.json`
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model (or one per fold) and write checkpoint, report and graph
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Validation data; without it the training data is split
        #[arg(long)]
        valid: Option<PathBuf>,
        /// Output directory
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        train_fraction: Option<f64>,
        /// Clusters for the final graph export
        #[arg(long)]
        clusters: Option<usize>,
        /// Continue from a checkpoint written with the same configuration
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Evaluate a checkpoint and print `auc=<value>`
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Require the checkpoint to match this configuration
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for `eval.json`
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-step CSV of predictions and forgetting diagnostics
        #[arg(long)]
        dump_predictions: Option<PathBuf>,
    },
    /// Write JSON and DOT exports of a checkpoint's concept graph
    ExportGraph {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output prefix; writes `<out>.json` and `<out>.dot`
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        clusters: usize,
    },
    /// Compare backprop with finite differences on a tiny model
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Variants to check; defaults to full, no_forget, no_graph and basic
        #[arg(long = "variant")]
        variants: Vec<dgmn::Variant>,
        /// Break the tanh backward rule to show the check catches it
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(dgmn::Error),
    /// The gradient check ran but exceeded its tolerance.
    GradientMismatch(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::GradientMismatch(m) => write!(f, "gradient check failed: {m}"),
        }
    }
}

impl From<dgmn::Error> for CliError {
    fn from(e: dgmn::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(dgmn::Error::Config(_)) => 2,
            CliError::Core(e) if e.is_data_error() => 3,
            CliError::Core(e) if e.is_numerical() => 4,
            CliError::Core(_) => 1,
            CliError::GradientMismatch(_) => 4,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Gen {
            students,
            questions,
            concepts,
            seq_len,
            seed,
            out,
        } => commands::gen(students, questions, concepts, seq_len, seed, &out),
        Command::Train {
            config,
            data,
            valid,
            out,
            folds,
            train_fraction,
            clusters,
            resume,
            model,
        } => {
            let mut run = serde_json::Map::new();
            let mut put = |key: &str, value: Option<serde_json::Value>| {
                if let Some(v) = value {
                    run.insert(key.to_string(), v);
                }
            };
            put("data", data.map(|p| p.to_string_lossy().into()));
            put("valid", valid.map(|p| p.to_string_lossy().into()));
            put("out", out.map(|p| p.to_string_lossy().into()));
            put("folds", folds.map(Into::into));
            put("train_fraction", train_fraction.map(Into::into));
            put("clusters", clusters.map(Into::into));
            commands::train(config.as_deref(), &model, run, resume.as_deref())
        }
        Command::Eval {
            checkpoint,
            data,
            config,
            out,
            dump_predictions,
        } => commands::eval(
            &checkpoint,
            &data,
            config.as_deref(),
            out.as_deref(),
            dump_predictions.as_deref(),
        ),
        Command::ExportGraph { checkpoint, out, clusters } => commands::export_graph(&checkpoint, &out, clusters),
        Command::Gradcheck {
            config,
            eps,
            tolerance,
            variants,
            inject_fault,
        } => commands::gradcheck(config.as_deref(), eps, tolerance, &variants, inject_fault),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
