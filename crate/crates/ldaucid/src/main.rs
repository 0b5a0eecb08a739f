use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ldaucid::config::parse_config;
use ldaucid::harness::{final_accuracies, run_ablation, run_experiment};
use ldaucid::selfcheck;

#[derive(Parser)]
#[command(
    name = "ldaucid",
    about = "Continual unsupervised domain adaptation: consolidated internal \
             distribution, sliced Wasserstein alignment, mean-of-features replay"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a config file.
    Run {
        config: PathBuf,
        /// Override the run seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the sweeps declared in the config's [ablation] section.
    Ablate {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle and property battery.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> ldaucid::Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = parse_config(&config)?;
            if let Some(seed) = seed {
                cfg.hyper.seed = seed;
            }
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            let records = run_experiment(&cfg)?;
            println!(
                "run \"{}\" finished: {} records -> {}",
                cfg.run_id,
                records.len(),
                cfg.output_dir.display()
            );
            for (domain, accuracy) in final_accuracies(&records) {
                println!("  domain {domain}: final accuracy {accuracy:.4}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate { config, seed, out } => {
            let mut cfg = parse_config(&config)?;
            if let Some(seed) = seed {
                cfg.hyper.seed = seed;
            }
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            let results = run_ablation(&cfg)?;
            for (run_id, records) in &results {
                let last = final_accuracies(records);
                let avg = if last.is_empty() {
                    0.0
                } else {
                    last.iter().map(|(_, a)| a).sum::<f64>() / last.len() as f64
                };
                println!("{run_id}: final average accuracy {avg:.4}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Check { seed } => {
            let outcomes = selfcheck::run_all(seed);
            let mut all_passed = true;
            for o in &outcomes {
                let status = if o.passed { "PASS" } else { "FAIL" };
                println!("[{status}] {}: {}", o.name, o.detail);
                all_passed &= o.passed;
            }
            Ok(if all_passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    }
}
