//! `nft-ood`: synthesize data, mine negatives, select crops, train, score,
//! evaluate and gradient-check from the command line.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data or format error,
//! 3 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nft_ood::Error;

use config::{Overrides, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
    Numeric(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numeric(_) => 3,
            CliError::Core(e) => match e {
                Error::InvalidConfig(_) | Error::NonPositiveTemperature(_) | Error::NonPositiveInput(_) => 1,
                Error::ZeroNorm { .. } | Error::NonFinite => 3,
                _ => 2,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(s) | CliError::Numeric(s) => f.write_str(s),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "nft-ood", version, about = "Negative feature tuning for OOD detection on pre-extracted features")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset.
    Synth,
    /// Pick the candidate labels least similar to the ID labels.
    MineNeg {
        /// Candidate text features (FBNK).
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// Candidate names, one per line.
        #[arg(long)]
        names: Option<PathBuf>,
        /// ID label features (FBNK).
        #[arg(long)]
        id_bank: Option<PathBuf>,
        #[arg(long)]
        m: Option<usize>,
        /// `max` or `quantile:<q>`.
        #[arg(long)]
        stat: Option<String>,
    },
    /// Build training rows from the most and least label-like crops.
    SelectCrops {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        q: Option<usize>,
    },
    /// Train the transform and write a checkpoint and loss trace.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// const-shift, vec-shift, scale-shift or mlp.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        hidden: Option<usize>,
    },
    /// Score the test images of a dataset.
    Score {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// AUROC and FPR at the target TPR from score files.
    Eval {
        /// `id,score,truth` CSV files.
        files: Vec<PathBuf>,
        /// Two FPR95 values whose harmonic mean is added to the report.
        #[arg(long)]
        pair: Option<String>,
    },
    /// Compare analytic gradients with extended-precision finite differences.
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt_grad: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::resolve(&cli.overrides)?;
    let set = |slot: &mut Option<PathBuf>, v: Option<PathBuf>| {
        if v.is_some() {
            *slot = v;
        }
    };
    match cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::MineNeg { lexicon, names, id_bank, m, stat } => {
            set(&mut cfg.paths.lexicon, lexicon);
            set(&mut cfg.paths.names, names);
            set(&mut cfg.paths.id_bank, id_bank);
            if let Some(m) = m {
                cfg.mining.m = m;
            }
            if let Some(s) = stat {
                cfg.mining.stat = s;
            }
            cfg.validate()?;
            commands::mine_neg(&cfg)
        }
        Command::SelectCrops { data, q } => {
            set(&mut cfg.paths.data, data);
            if let Some(q) = q {
                cfg.mining.q = q;
            }
            commands::select_crops(&cfg)
        }
        Command::Train { data, mode, hidden } => {
            set(&mut cfg.paths.data, data);
            if let Some(m) = mode {
                cfg.model.mode = m.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
            }
            if hidden.is_some() {
                cfg.model.hidden = hidden;
            }
            cfg.validate()?;
            commands::train_cmd(&cfg)
        }
        Command::Score { data, checkpoint } => {
            set(&mut cfg.paths.data, data);
            set(&mut cfg.paths.checkpoint, checkpoint);
            commands::score(&cfg)
        }
        Command::Eval { files, pair } => commands::eval(&cfg, &files, pair.as_deref()),
        Command::Gradcheck { corrupt_grad } => commands::gradcheck_cmd(&cfg, corrupt_grad),
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("NFT_OOD_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("NFT_OOD_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match init_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
