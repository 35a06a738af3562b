use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gialab::experiment::{compare, run, write_error_report, ErrorReport, ExperimentConfig};
use gialab::Error;

/// Runs gradient-inversion experiments described by a TOML file.
#[derive(Parser)]
#[command(version, args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(subcommand)]
    command: Option<Sub>,
    /// Experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory; overrides `out` in the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    /// Single seed replacing the configured seed list.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Sub {
    /// Consolidates `invert` runs into one table.
    Compare {
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        /// Output CSV; standard output if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn fail(dir: Option<&PathBuf>, e: &Error) -> ExitCode {
    let report = ErrorReport::from_error(e);
    eprintln!("{}", serde_json::to_string(&report).expect("serializable"));
    if let Some(dir) = dir {
        if let Err(w) = write_error_report(dir, e) {
            eprintln!("could not write error report: {w}");
        }
    }
    ExitCode::from(if matches!(e, Error::Invalid(_) | Error::Config(_) | Error::Format { .. }) { 2 } else { 1 })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(Sub::Compare { runs, out }) = cli.command {
        let table = match compare(&runs) {
            Ok(t) => t,
            Err(e) => return fail(None, &e),
        };
        return match out {
            Some(path) => match table.write(&path) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(None, &e),
            },
            None => {
                print!("{}", table.to_csv());
                ExitCode::SUCCESS
            }
        };
    }
    let Some(path) = cli.config else {
        eprintln!("either --config or the compare subcommand is required");
        return ExitCode::from(2);
    };
    let mut cfg = match ExperimentConfig::load(&path) {
        Ok(c) => c,
        Err(e) => return fail(cli.out.as_ref(), &e),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    let out = cli
        .out
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-{}", cfg.command.as_str(), cfg.fingerprint())));
    match run(&cfg, &out, cli.jobs) {
        Ok(outcome) => {
            println!("{}", outcome.dir.join("summary.csv").display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(Some(&out), &e),
    }
}
