use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use oprenew_lab::config::ExperimentConfig;
use oprenew_lab::error::LabError;
use oprenew_lab::{run, Subcommand};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    /// return partition and tail fit
    Tails,
    /// leading eigenvalue of the perturbed operator
    Spectrum,
    /// scalar and operator renewal series
    Renewal,
    /// Monte Carlo correlations
    Mix,
    /// higher-order expansion (Markov maps)
    Rates,
    /// slice decay and Lasota-Yorke audit
    Norms,
    /// full acceptance suite
    Accept,
    /// print the canonical configuration and exit
    PrintConfig,
}

#[derive(Debug, Parser)]
#[command(name = "oprenew", version, about = "Operator renewal experiments for intermittent maps")]
struct Cli {
    command: Command,
    /// TOML configuration; omitted fields take their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// multiply every tolerance by this factor
    #[arg(long)]
    gate_slack: Option<f64>,
}

fn load(cli: &Cli) -> Result<ExperimentConfig, LabError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(g) = cli.gate_slack {
        cfg.gate_slack = g;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let sub = match cli.command {
        Command::Tails => Subcommand::Tails,
        Command::Spectrum => Subcommand::Spectrum,
        Command::Renewal => Subcommand::Renewal,
        Command::Mix => Subcommand::Mix,
        Command::Rates => Subcommand::Rates,
        Command::Norms => Subcommand::Norms,
        Command::Accept => Subcommand::Accept,
        Command::PrintConfig => {
            return match cfg.to_canonical() {
                Ok(t) => {
                    print!("{t}");
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(e.exit_code() as u8)
                }
            };
        }
    };
    match run(sub, &cfg) {
        Ok(r) => {
            print!("{}", r.summary);
            println!("output in {}", cfg.out.display());
            if r.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
