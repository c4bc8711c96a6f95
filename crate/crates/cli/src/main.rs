mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Parser, Subcommand, ValueEnum};

use meant::dataset::LabelMode;

#[derive(Parser)]
#[command(name = "meant", version, about = "Multimodal lag-window stock movement pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelArg {
    Crossover,
    Stocknet,
}

impl From<LabelArg> for LabelMode {
    fn from(a: LabelArg) -> Self {
        match a {
            LabelArg::Crossover => LabelMode::Crossover,
            LabelArg::Stocknet => LabelMode::Stocknet,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Build lag windows, graphs and vocabulary from price and tweet files.
    BuildDataset {
        #[arg(long)]
        prices: PathBuf,
        #[arg(long)]
        tweets: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lag: Option<usize>,
        #[arg(long, value_enum)]
        label_mode: Option<LabelArg>,
        /// Run config whose `data.build` section supplies the other settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model; writes the log, best checkpoint and validation metrics.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on one dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
    },
    /// Train and score a list of configuration variants.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated names, e.g. `full,text+price,price-only,meanpool,seqproj,lag1`.
        #[arg(long)]
        variants: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks on every op and the toy model.
    Gradcheck {
        /// Gradient suite settings (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render MACD graphs of one ticker as binary blobs and PPM files.
    RenderGraphs {
        #[arg(long)]
        prices: PathBuf,
        #[arg(long)]
        ticker: String,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated dates; defaults to the last trading day.
        #[arg(long, value_delimiter = ',')]
        days: Vec<NaiveDate>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// A command failure and the exit code it maps to.
pub enum Failure {
    /// Bad input or configuration: exit 1.
    Invalid(anyhow::Error),
    /// Failure while running: exit 2.
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Invalid(e) | Failure::Runtime(e) => e,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MEANT_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::BuildDataset {
            prices,
            tweets,
            out,
            lag,
            label_mode,
            config,
        } => commands::build_dataset(
            &prices,
            &tweets,
            &out,
            lag,
            label_mode.map(Into::into),
            config.as_deref(),
        ),
        Command::Train { config, data, out } => commands::train(config.as_deref(), data, out),
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
            batch_size,
        } => {
            let split = match split {
                SplitArg::Train => "train",
                SplitArg::Val => "val",
                SplitArg::Test => "test",
            };
            commands::eval(&checkpoint, &data, split, out, batch_size)
        }
        Command::Ablate {
            config,
            data,
            variants,
            out,
        } => commands::ablate(config.as_deref(), data, &variants, out),
        Command::Gradcheck { config } => commands::gradcheck(config.as_deref()),
        Command::RenderGraphs {
            prices,
            ticker,
            out,
            days,
            config,
        } => commands::render_graphs(&prices, &ticker, &out, &days, config.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
