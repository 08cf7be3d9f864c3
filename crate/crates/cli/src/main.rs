//! `imn`: generate impulsive-noise datasets, train and evaluate estimators,
//! benchmark multitask against single-task models, and predict parameters.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use commands::{PredictInput, TrainMode};
use config::{ConfigError, Overrides, RunConfig, DEFAULT_CONFIG};

#[derive(Parser)]
#[command(name = "imn", version, about = "Impulsive noise parameter estimation")]
struct Cli {
    /// TOML run configuration; unset keys take the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the built-in default configuration and exit.
    #[arg(long)]
    print_default_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args)]
struct DataArg {
    /// Dataset file; defaults to `<out_dir>/dataset.imn`.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the parameter grid and write the dataset with its manifest.
    Generate {
        #[arg(long)]
        n_per_config: Option<usize>,
        /// Dataset file to write; defaults to `<out_dir>/dataset.imn`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train a multitask or single-task model.
    Train {
        #[command(flatten)]
        data: DataArg,
        /// mtl, stl-p, stl-r or stl-gamma.
        #[arg(long, default_value = "mtl")]
        mode: String,
        /// equal, unequal, or three comma-separated weights.
        #[arg(long)]
        lambdas: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Run directory; defaults to `<out_dir>/<mode>`.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split of its dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Compare a multitask checkpoint against single-task checkpoints.
    Bench {
        #[arg(long)]
        mtl: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        stl: Vec<PathBuf>,
        #[command(flatten)]
        data: DataArg,
    },
    /// Estimate (p, R, Γ) for one received sequence.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset whose manifest defines the preprocessing.
        #[command(flatten)]
        data: DataArg,
        /// File with one `re,im` pair per line; omit to simulate a sequence.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1)]
        p: f64,
        #[arg(long, default_value_t = 100.0)]
        r: f64,
        #[arg(long, default_value_t = 10.0)]
        gamma: f64,
        /// Seed of the simulated sequence.
        #[arg(long, default_value_t = 1)]
        sequence_seed: u64,
    },
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match e.downcast_ref::<imn_core::Error>() {
        Some(imn_core::Error::Config(_)) => 2,
        Some(imn_core::Error::NonFinite(_)) => 4,
        _ => 3,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.print_default_config {
        print!("{DEFAULT_CONFIG}");
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(ConfigError("no command given; see --help".into()).into());
    };
    let mut overrides = Overrides {
        seed: cli.seed,
        out_dir: cli.out,
        ..Default::default()
    };
    match &command {
        Command::Generate { n_per_config, .. } => overrides.n_per_config = *n_per_config,
        Command::Train { lambdas, epochs, .. } => {
            overrides.lambdas = lambdas.clone();
            overrides.epochs = *epochs;
        }
        _ => {}
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let data_path = |d: DataArg| d.data.unwrap_or_else(|| commands::default_dataset_path(&cfg));
    match command {
        Command::Generate { output, .. } => {
            commands::generate(&cfg, output)?;
        }
        Command::Train {
            data, mode, run_dir, ..
        } => {
            let mode = TrainMode::parse(&mode)?;
            commands::train(&cfg, &data_path(data), mode, run_dir)?;
        }
        Command::Eval {
            checkpoint,
            data,
            split,
        } => {
            commands::eval(&cfg, &checkpoint, &data_path(data), &split)?;
        }
        Command::Bench { mtl, stl, data } => {
            commands::bench(&cfg, &mtl, &stl, &data_path(data), None)?;
        }
        Command::Predict {
            checkpoint,
            data,
            input,
            p,
            r,
            gamma,
            sequence_seed,
        } => {
            let input = PredictInput {
                input,
                p,
                r,
                gamma,
                seed: sequence_seed,
            };
            commands::predict(&checkpoint, &data_path(data), &input)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
