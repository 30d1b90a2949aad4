use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flsim_harness::config::{parse_config, Overrides};
use flsim_harness::experiment::run_experiment;
use flsim_harness::report::report_table;
use flsim_harness::selftest::run_selftest;

#[derive(Parser)]
#[command(name = "flsim", about = "Federated-learning simulation lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: `runs/<config stem>`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace the config's seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Run only this strategy, overriding the config.
        #[arg(long)]
        strategy: Option<String>,
        /// Evaluation cadence in rounds.
        #[arg(long)]
        eval_every: Option<usize>,
    },
    /// Tabulate rounds-to-accuracy over the CSVs of a finished experiment.
    Report {
        #[arg(long)]
        dir: PathBuf,
        /// Accuracy targets, e.g. `--target 0.95 --target 0.97`.
        #[arg(long = "target", required = true)]
        targets: Vec<f64>,
    },
    /// Run the fast invariant suite.
    Selftest,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            strategy,
            eval_every,
        } => {
            let overrides = Overrides {
                seed,
                strategy,
                eval_every,
            };
            let spec = match parse_config(&config, &overrides) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("{e}");
                    return ExitCode::FAILURE;
                }
            };
            let out_dir = out.unwrap_or_else(|| {
                let stem = config
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("experiment");
                PathBuf::from("runs").join(stem)
            });
            match run_experiment(&spec, &out_dir) {
                Ok(report) => {
                    for row in &report.summary {
                        println!(
                            "{}: seeds={} failed={} top_accuracy={:.4} +/- {:.4}",
                            row.strategy.tag(),
                            row.seeds,
                            row.failed,
                            row.mean_top_accuracy,
                            row.std_top_accuracy
                        );
                    }
                    println!("wrote {}", report.out_dir.display());
                    if report.outcomes.iter().any(|o| o.error.is_some()) {
                        ExitCode::FAILURE
                    } else {
                        ExitCode::SUCCESS
                    }
                }
                Err(e) => {
                    eprintln!("{e}");
                    ExitCode::FAILURE
                }
            }
        }
        Command::Report { dir, targets } => match report_table(&dir, &targets) {
            Ok(table) => {
                print!("{table}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("{e}");
                ExitCode::FAILURE
            }
        },
        Command::Selftest => {
            if run_selftest() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
