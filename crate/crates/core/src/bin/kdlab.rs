use clap::{Parser, Subcommand};
use kdlab::cli::{self, Experiment};
use kdlab::criteria::KdVariant;
use kdlab::incremental::IlMethod;
use std::path::PathBuf;
use std::process::ExitCode;

/// Knowledge-distillation experiments on small MLPs.
#[derive(Debug, Parser)]
#[command(name = "kdlab", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the numerical theory checks and print their reports as JSON.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the teacher and save its checkpoint in the output directory.
    TrainTeacher {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Distill one student per seed with the given variant.
    Distill {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        variant: KdVariant,
    },
    /// Sweep the student's feature width for every configured variant.
    SweepWidth {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Task-incremental training with one method.
    Incremental {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        method: IlMethod,
    },
    /// Recompute summaries in a results directory from its CSV files.
    Report {
        #[arg(long = "in")]
        dir: PathBuf,
    },
}

fn print_json<T: serde::Serialize>(value: &T) -> kdlab::Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn run(args: Args) -> kdlab::Result<bool> {
    match args.command {
        Command::Verify { seed } => {
            let (reports, ok) = cli::verify(seed)?;
            print_json(&reports)?;
            Ok(ok)
        }
        Command::TrainTeacher { config } => {
            let exp = Experiment::load(&config)?;
            let splits = exp.splits()?;
            print_json(&cli::train_teacher(&exp, &splits)?.1)?;
            Ok(true)
        }
        Command::Distill { config, variant } => {
            let exp = Experiment::load(&config)?;
            print_json(&cli::distill(&exp, variant, &cli::worker_pool()?)?)?;
            Ok(true)
        }
        Command::SweepWidth { config } => {
            let exp = Experiment::load(&config)?;
            print_json(&cli::sweep_width(&exp, &cli::worker_pool()?)?)?;
            Ok(true)
        }
        Command::Incremental { config, method } => {
            let exp = Experiment::load(&config)?;
            print_json(&cli::incremental(&exp, method, &cli::worker_pool()?)?)?;
            Ok(true)
        }
        Command::Report { dir } => {
            print_json(&cli::report(&dir)?)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("kdlab: verification failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("kdlab: {e}");
            ExitCode::from(2)
        }
    }
}
