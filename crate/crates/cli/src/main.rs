use clap::{Parser, Subcommand};
use dldseg_cli::{cmd_compare, cmd_run, cmd_synth};
use dldseg_core::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "dldseg",
    version,
    about = "Weakly supervised lung-texture segmentation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the phantom dataset a config describes.
    Synth {
        /// Experiment configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Write the dataset here instead of the config's dataset_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the generator seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and evaluate every configured method across all folds.
    Run {
        /// Experiment configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Write results here instead of the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Folds trained concurrently. Outputs do not depend on this.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Merge summaries from finished runs into one table.
    Compare {
        /// Results directories to merge.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Where the merged summary.csv is written.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth { config, out, seed } => {
            cmd_synth(&config, out.as_deref(), seed).map(|dir| {
                println!("dataset written to {}", dir.display());
                ExitCode::SUCCESS
            })
        }
        Command::Run { config, out, jobs, seed } => {
            cmd_run(&config, out.as_deref(), jobs, seed).map(|run| {
                if run.failures.is_empty() {
                    if let Some(report) = &run.report {
                        for s in &report.summaries {
                            println!(
                                "{}: dice {:.4} precision {:.4} recall {:.4}",
                                s.method, s.dice_mean, s.precision_mean, s.recall_mean
                            );
                        }
                    }
                    println!("report written to {}", run.out_dir.display());
                    ExitCode::SUCCESS
                } else {
                    for f in &run.failures {
                        eprintln!("fold {} {} failed: {}", f.fold, f.method, f.error);
                    }
                    eprintln!("see {}", run.out_dir.join("failures.csv").display());
                    ExitCode::FAILURE
                }
            })
        }
        Command::Compare { inputs, out } => cmd_compare(&inputs, &out).map(|rows| {
            for row in &rows {
                println!("{row}");
            }
            println!("merged summary written to {}", out.join("summary.csv").display());
            ExitCode::SUCCESS
        }),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
