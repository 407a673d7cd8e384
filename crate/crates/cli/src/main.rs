use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qtele_cli::config::{Profile, RunConfig};
use qtele_cli::{cmd_check, cmd_figures, cmd_run, CliError, Overrides};

/// Quantum-trajectory simulation of teleportation with local redundant encoding.
#[derive(Parser, Debug)]
#[command(name = "qtele", version)]
struct Cli {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; overrides the config file.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Write per-trajectory stage records to <output_dir>/trace.jsonl.
    #[arg(long, global = true)]
    trace: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run an ensemble and write ensemble.csv and ensemble.json.
    Run { config: PathBuf },
    /// Validity ratios, analytic-vs-numeric pulse agreement and the master-equation cross-check.
    Check { config: Option<PathBuf> },
    /// Run an ensemble and write fig3.csv, fig4.csv and fig5.csv.
    Figures { config: PathBuf },
    /// Print the resolved configuration of a file or a profile.
    Config {
        config: Option<PathBuf>,
        #[arg(long, value_enum, conflicts_with = "config")]
        profile: Option<Profile>,
    },
}

fn load(path: Option<&PathBuf>, overrides: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::profile(Profile::Paper),
    };
    overrides.apply(&mut cfg);
    if cfg.threads == Some(0) {
        return Err(CliError::Validation("threads must be at least 1".into()));
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let overrides = Overrides {
        seed: cli.seed,
        threads: cli.threads,
        trace: cli.trace,
    };
    let mut out = std::io::stdout().lock();
    let mut log = std::io::stderr();
    match cli.command {
        Command::Run { config } => {
            cmd_run(&load(Some(&config), &overrides)?, overrides.trace, &mut out, &mut log)?;
        }
        Command::Figures { config } => {
            cmd_figures(&load(Some(&config), &overrides)?, overrides.trace, &mut out, &mut log)?;
        }
        Command::Check { config } => {
            let failed = cmd_check(&load(config.as_ref(), &overrides)?, &mut out, &mut log)?;
            if !failed.is_empty() {
                return Err(CliError::Validation(format!("failed checks: {}", failed.join("; "))));
            }
        }
        Command::Config { config, profile } => {
            let mut cfg = match profile {
                Some(p) => RunConfig::profile(p),
                None => load(config.as_ref(), &Overrides::default())?,
            };
            overrides.apply(&mut cfg);
            print!("{}", cfg.to_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
