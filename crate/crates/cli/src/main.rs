use anyhow::Result;
use clap::{Parser, Subcommand};
use neuropt_cli::commands::{self, SearchArgs, TrainArgs, TransferArgs, TransferMode};
use neuropt_core::objectives::ObjectiveSpec;
use neuropt_core::space::Genotype;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "neuropt", version, about = "Cell-based architecture search for continuous optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Architecture search for every seed of a config; writes search.csv,
    /// best.json and summary.json under <out>/seed-<s>/.
    Search {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; defaults to the available parallelism.
        #[arg(long)]
        workers: Option<usize>,
        /// Continue an interrupted run from its log.
        #[arg(long)]
        resume: bool,
    },
    /// Train one genotype and print the JSON report.
    Train {
        #[arg(long)]
        genotype: Genotype,
        #[arg(long)]
        objective: ObjectiveSpec,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Transfer to a target problem: nas1 retrains the head of a checkpoint,
    /// nas2 trains the architecture from scratch.
    Transfer {
        #[arg(value_enum)]
        mode: TransferMode,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        genotype: Option<Genotype>,
        #[arg(long)]
        target: ObjectiveSpec,
        #[arg(long)]
        cutoff: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ensemble manifest and print the JSON report.
    Ensemble {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Energy of a protein sequence; angles in degrees, all zero by default.
    Protein {
        id: String,
        #[arg(long)]
        angles: Option<PathBuf>,
    },
    /// Run the oracle suite and print one PASS/FAIL line per check.
    Verify,
}

fn run(cli: Cli) -> Result<bool> {
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::Search {
            config,
            seed,
            out: dir,
            workers,
            resume,
        } => {
            let args = SearchArgs {
                config,
                seed,
                out: dir,
                workers,
                resume,
            };
            commands::cmd_search(&args, &mut out)?;
        }
        Command::Train {
            genotype,
            objective,
            config,
            seed,
            out: dir,
        } => {
            let args = TrainArgs {
                genotype,
                objective,
                config,
                seed,
                out: dir,
            };
            commands::cmd_train(&args, &mut out)?;
        }
        Command::Transfer {
            mode,
            checkpoint,
            genotype,
            target,
            cutoff,
            config,
            seed,
            out: dir,
        } => {
            let args = TransferArgs {
                mode,
                checkpoint,
                genotype,
                target,
                cutoff,
                config,
                seed,
                out: dir,
            };
            commands::cmd_transfer(&args, &mut out)?;
        }
        Command::Ensemble { manifest, out: dir } => {
            commands::cmd_ensemble(&manifest, dir.as_deref(), &mut out)?;
        }
        Command::Protein { id, angles } => {
            commands::cmd_protein(&id, angles.as_deref(), &mut out)?;
        }
        Command::Verify => return commands::cmd_verify(&mut out),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
