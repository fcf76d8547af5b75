//! `scenario-forecast`: ingest sensor data, cluster days into operating
//! scenarios, evolve one temperature model per scenario, and forecast.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use log::error;

use commands::{PredictArgs, EXIT_INPUT};
use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "scenario-forecast", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value by dotted path, e.g. `library.k_max=6`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for clustering, evolution and synthetic data.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Regularize the sensor CSV and report dropped days.
    Ingest,
    /// Cluster valid days and report the silhouette curve.
    Cluster,
    /// Train the scenario library on the training split.
    Train,
    /// Forecast one day with the trained library.
    Predict {
        /// Library JSON (default: `library.json` in the output directory).
        #[arg(long)]
        library: Option<PathBuf>,
        /// Day to forecast (default: last valid day).
        #[arg(long)]
        date: Option<NaiveDate>,
        /// Keep the library's constants as trained.
        #[arg(long)]
        no_refit: bool,
    },
    /// Score the library on the held-out split.
    Evaluate {
        #[arg(long)]
        library: Option<PathBuf>,
    },
    /// Generate a labelled synthetic data set.
    Synth,
    /// ingest, cluster, train and evaluate in sequence.
    Pipeline,
}

fn run(cli: Cli) -> commands::Outcome {
    use commands::Stage;
    let mut config = RunConfig::load(cli.common.config.as_deref(), &cli.common.overrides).stage(EXIT_INPUT)?;
    if let Some(seed) = cli.common.seed {
        config.set_seed(seed);
    }
    let out = cli.common.out.unwrap_or_else(|| config.out.clone());
    std::fs::create_dir_all(&out).stage(EXIT_INPUT)?;
    match cli.command {
        Command::Ingest => commands::ingest(&config, &out),
        Command::Cluster => commands::cluster(&config, &out),
        Command::Train => commands::train(&config, &out),
        Command::Predict {
            library,
            date,
            no_refit,
        } => commands::predict(
            &config,
            &out,
            &PredictArgs {
                library,
                date,
                no_refit,
            },
        ),
        Command::Evaluate { library } => commands::evaluate(&config, &out, library.as_deref()),
        Command::Synth => commands::synth(&config, &out),
        Command::Pipeline => commands::pipeline(&config, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            error!("{failure}");
            ExitCode::from(failure.code)
        }
    }
}
