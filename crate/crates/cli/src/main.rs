//! `rarf`: generate data, train, adapt, forecast and evaluate
//! resolution-aware retrieval forecasters.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "rarf", version, about = "Resolution-aware retrieval-augmented station forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory receiving every artifact and the run manifest.
    #[arg(long, default_value = "rarf-out")]
    out: PathBuf,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Stations {
    Train,
    Val,
    Test,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Axis {
    Horizon,
    Context,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Family {
    Haar,
    Db2,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Unit {
    Kelvin,
    Fahrenheit,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset.
    GenSynth {
        #[command(flatten)]
        common: Common,
    },
    /// Convert a long-format CSV into a dataset directory.
    Ingest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        temperature_unit: Option<Unit>,
    },
    /// Phase 1: train on the train stations.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Phase 2: adapt the transfer components to train stations.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// One train station; all of them when omitted.
        #[arg(long)]
        target: Option<String>,
    },
    /// Zero-shot forecast for one station at one origin.
    Forecast {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long)]
        context_hours: Option<usize>,
        /// Epoch hour of the first forecast hour; defaults to the first
        /// test-period origin.
        #[arg(long)]
        origin: Option<i64>,
    },
    /// Metric report over the test period.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        context_hours: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, value_enum, default_value = "test")]
        stations: Stations,
        /// Directory of phase-2 checkpoints named `<station>.ckpt`; each
        /// station is scored with its own model.
        #[arg(long)]
        adapted: Option<PathBuf>,
    },
    /// Per-band retrieval plan for a station.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        target: String,
        /// Per-band sizes, fastest band first.
        #[arg(long, value_delimiter = ',')]
        band_ks: Option<Vec<usize>>,
    },
    /// Wavelet bands of a one-column signal CSV.
    Decompose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        levels: usize,
        #[arg(long, value_enum, default_value = "haar")]
        family: Family,
    },
    /// Band correlation against station distance.
    CorrDist {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2000)]
        pairs: usize,
        #[arg(long, default_value_t = 25.0)]
        bin_km: f64,
    },
    /// Classical baselines on the test stations.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        context_hours: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Re-evaluate a checkpoint over horizons or context lengths.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
