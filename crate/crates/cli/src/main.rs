//! `ergsyn`: simulate ERG data, train the conditional GAN, generate
//! synthetic records, train and evaluate the classifiers, and draw figures.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 GAN training diverged.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use erg_models::GanError;

use erg_cli::commands::{self, Run};
use erg_cli::config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "ergsyn",
    version,
    about = "Synthetic ERG generation and augmentation experiments"
)]
struct Cli {
    /// TOML run configuration; every field has a default.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Global seed; all other seeds are derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root for run directories (the environment variable ERGSYN_OUTPUT_ROOT takes precedence).
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    run_name: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write an oracle dataset to data/real.csv.
    Simulate {
        #[arg(long)]
        n_per_cell: Option<usize>,
    },
    /// Train the conditional GAN on the real records outside the test set.
    TrainGan {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Sample synthetic records from the selected checkpoint.
    Generate {
        #[arg(long)]
        n_per_cell: Option<usize>,
    },
    /// Train the configured classifiers on the first fold and score them on the test set.
    TrainClf {
        /// Add the generated records to the training fold.
        #[arg(long)]
        augment: bool,
    },
    /// Cross-validated comparison with and without synthetic records.
    Evaluate,
    /// Real-vs-synthetic overlays per strength and class, and the GAN loss curves.
    Plot,
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| UsageError(format!("{e:#}")))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(n) = &cli.run_name {
        cfg.run_name = Some(n.clone());
    }
    match cli.command {
        Command::Simulate {
            n_per_cell: Some(n),
        } => cfg.data.n_per_cell = n,
        Command::TrainGan { epochs: Some(e) } => cfg.gan.epochs = e,
        Command::Generate {
            n_per_cell: Some(n),
        } => cfg.generate.n_per_cell = n,
        _ => {}
    }
    cfg.gan.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut run = Run::open(config(&cli)?)?;
    log::info!("run directory {}", run.dir.display());
    match cli.command {
        Command::Simulate { .. } => drop(commands::simulate(&mut run)?),
        Command::TrainGan { .. } => drop(commands::train_gan(&mut run)?),
        Command::Generate { .. } => drop(commands::generate(&mut run)?),
        Command::TrainClf { augment } => drop(commands::train_clf(&mut run, augment)?),
        Command::Evaluate => drop(commands::evaluate(&mut run)?),
        Command::Plot => drop(commands::plot(&mut run)?),
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.chain().any(|c| {
        matches!(
            c.downcast_ref::<GanError>(),
            Some(GanError::Diverged { .. })
        )
    }) {
        3
    } else if e.chain().any(|c| c.is::<UsageError>()) {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
