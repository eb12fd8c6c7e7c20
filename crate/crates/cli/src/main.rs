//! `bda`: ingest prices, train the agent, backtest it against the baselines
//! and merge reports.
//!
//! Exit codes: 0 ok, 2 input error, 3 training diverged, 4 a backtest was
//! truncated by bankruptcy or a loss beyond the investment amount.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};

use config::{Ablation, RunConfig};
use error::CliError;

#[derive(Parser)]
#[command(name = "bda", version, about = "Black-Litterman policy-gradient portfolio agent")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    prices: Option<PathBuf>,
    #[arg(long)]
    tickers: Option<PathBuf>,
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Repeatable.
    #[arg(long, value_enum)]
    ablation: Vec<Ablation>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(d) = &self.out_dir {
            cfg.output.dir = d.clone();
        }
        if let Some(p) = &self.prices {
            cfg.data.prices = p.clone();
        }
        if let Some(p) = &self.tickers {
            cfg.data.tickers = p.clone();
        }
        if let Some(p) = &self.cache {
            cfg.data.cache = p.clone();
        }
        for a in &self.ablation {
            cfg.ablation.enable(*a);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Align the raw price file on the ticker list and cache it.
    Ingest(Common),
    /// Train the agent on the training window.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        total_steps: Option<usize>,
    },
    /// Out-of-sample backtest of the agent and the comparison strategies.
    Backtest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        baselines_only: bool,
    },
    /// Merge per-strategy JSON reports into one table sorted by AR.
    Report {
        inputs: Vec<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Print the default configuration.
    Config,
    /// Write a seeded random-walk price file.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Ticker manifest to name the assets; otherwise S01, S02, ...
        #[arg(long)]
        tickers: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        assets: usize,
        #[arg(long, default_value_t = 1260)]
        days: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Daily log2 drift.
        #[arg(long, default_value_t = 2e-4, allow_negative_numbers = true)]
        drift: f64,
        #[arg(long, default_value_t = 0.01)]
        vol: f64,
        #[arg(long, default_value_t = 0.3)]
        correlation: f64,
        #[arg(long, default_value = "2018-01-02")]
        start: NaiveDate,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Command::Ingest(c) => commands::ingest(&c.resolve()?),
        Command::Train { common, total_steps } => {
            let mut cfg = common.resolve()?;
            if let Some(t) = total_steps {
                cfg.train.total_steps = t;
            }
            cfg.validate()?;
            commands::train(&cfg)
        }
        Command::Backtest {
            common,
            checkpoint,
            baselines_only,
        } => commands::backtest(&common.resolve()?, checkpoint.as_deref(), baselines_only),
        Command::Report { inputs, out } => commands::report(&inputs, out.as_deref()),
        Command::Config => {
            print!("{}", RunConfig::default().to_toml());
            Ok(())
        }
        Command::Synth {
            out,
            tickers,
            assets,
            days,
            seed,
            drift,
            vol,
            correlation,
            start,
        } => commands::synth(&commands::SynthArgs {
            out,
            tickers,
            assets,
            days,
            seed,
            drift,
            vol,
            correlation,
            start,
        }),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
