use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use driftcfl::ablation::{report, run_ablation, AblationAxis};
use driftcfl::config::ExperimentConfig;
use driftcfl::engine::{run_experiment, Engine, SUMMARY_FILE};
use driftcfl::theory::{verify_theory, TheoryConfig};
use driftcfl::Error;

const THEORY_FAILED: u8 = 3;

#[derive(Parser)]
#[command(name = "driftcfl", version, about = "Clustered federated learning under data drift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run { config: PathBuf },
    /// Sweep one config axis and write a merged table.
    Ablate {
        config: PathBuf,
        #[arg(long)]
        axis: String,
    },
    /// Check the convergence analysis on quadratic clients.
    VerifyTheory {
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Continue a run from its latest checkpoint.
    Resume { run_dir: PathBuf },
    /// Print accuracy and heterogeneity series as CSV.
    Report { run_dir: PathBuf },
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config } => {
            let cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            match run_experiment(cfg) {
                Ok((dir, s)) => {
                    println!("{}", dir.join(SUMMARY_FILE).display());
                    println!("final_mean_accuracy={} final_k={} global_reclusters={}", s.final_mean_accuracy, s.final_k, s.global_reclusters);
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Ablate { config, axis } => {
            let Some(axis) = AblationAxis::parse(&axis) else {
                let names: Vec<&str> = AblationAxis::ALL.iter().map(|a| a.name()).collect();
                return fail(Error::Config(vec![format!("unknown axis {axis}; expected one of {}", names.join(", "))]));
            };
            let cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            match run_ablation(&cfg, axis) {
                Ok((path, rows)) => {
                    println!("{}", path.display());
                    for r in &rows {
                        let acc = r.summary.as_ref().map_or(String::from("-"), |s| s.final_mean_accuracy.to_string());
                        println!("{}={} {} final_mean_accuracy={}", r.axis, r.value, r.status, acc);
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::VerifyTheory { params } => {
            let cfg = match params {
                Some(p) => match std::fs::read_to_string(&p).map_err(Error::from).and_then(|t| toml::from_str::<TheoryConfig>(&t).map_err(Error::from)) {
                    Ok(c) => c,
                    Err(e) => return fail(e),
                },
                None => TheoryConfig::default(),
            };
            match verify_theory(&cfg) {
                Ok(report) => {
                    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
                    if report.passed {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(THEORY_FAILED)
                    }
                }
                Err(e) => fail(e),
            }
        }
        Command::Resume { run_dir } => match Engine::resume(&run_dir).and_then(|mut e| e.run()) {
            Ok(s) => {
                println!("{}", run_dir.join(SUMMARY_FILE).display());
                println!("final_mean_accuracy={} final_k={}", s.final_mean_accuracy, s.final_k);
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::Report { run_dir } => match report(&run_dir) {
            Ok(text) => {
                print!("{text}");
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
    }
}
