use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use metacal::app::{cmd_eval, cmd_predict, cmd_reliability, cmd_train, LoadedConfig, PredictArgs};
use metacal::calibration::CdfVariant;
use metacal::Error;

/// Meta-learned, calibrated few-shot regression.
///
/// Relative output directories resolve against $METACAL_OUTPUT_ROOT when it
/// is set, otherwise against the config file's directory.
#[derive(Parser)]
#[command(name = "metacal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Uncalibrated,
    Calibrated,
    Empirical,
}

impl From<Variant> for CdfVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Uncalibrated => CdfVariant::Uncalibrated,
            Variant::Calibrated => CdfVariant::Calibrated,
            Variant::Empirical => CdfVariant::Empirical,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train on the configured data and write checkpoint and trace.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on the meta-test tasks.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to checkpoint.json in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides the config's eval.variant.
        #[arg(long, value_enum)]
        variant: Option<Variant>,
    },
    /// Predict mean, variance and quantiles for new inputs from a support set.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV with feature columns and the target column.
        #[arg(long)]
        support: PathBuf,
        /// CSV with the feature columns.
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        target_column: String,
        /// Comma-separated; defaults to every support column except the target.
        #[arg(long, value_delimiter = ',')]
        features: Option<Vec<String>>,
        /// Write CSV here instead of standard output.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "calibrated")]
        variant: Variant,
    },
    /// Write reliability-diagram data for the meta-test tasks.
    Reliability {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> metacal::Result<()> {
    match cli.command {
        Command::Train { config } => cmd_train(&LoadedConfig::load(config)?).map(drop),
        Command::Eval {
            config,
            checkpoint,
            variant,
        } => cmd_eval(
            &LoadedConfig::load(config)?,
            checkpoint.as_deref(),
            variant.map(Into::into),
        )
        .map(drop),
        Command::Predict {
            checkpoint,
            support,
            query,
            target_column,
            features,
            output,
            variant,
        } => cmd_predict(&PredictArgs {
            checkpoint,
            support,
            query,
            target_column,
            feature_columns: features,
            output,
            variant: variant.into(),
        })
        .map(drop),
        Command::Reliability { config, checkpoint } => {
            cmd_reliability(&LoadedConfig::load(config)?, checkpoint.as_deref()).map(drop)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if Error::is_user_error(&e) { 1 } else { 2 })
        }
    }
}
