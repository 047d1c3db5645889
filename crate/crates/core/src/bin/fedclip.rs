use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedclip::runner::{self, ExperimentConfig, RunOptions, Table1Settings};
use fedclip::{Error, Result};

#[derive(Parser)]
#[command(name = "fedclip", version, about = "Clipped and differentially private FedAvg simulator")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Write the stationary-point table of the slope ensemble as CSV.
    Table1 {
        #[arg(long)]
        out: PathBuf,
        /// Optional config with a [table1] table.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Paired deltas between two finished runs (B minus A).
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Also write per-round deltas as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed_override,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let opts = RunOptions {
                out,
                seed_override,
                threads: cli.threads,
            };
            let manifest = runner::run(&cfg, &opts)?;
            println!("{}", serde_json::to_string(&manifest).expect("manifest serializes"));
        }
        Command::Table1 { out, config } => {
            let settings = match config {
                Some(path) => ExperimentConfig::load(&path)?.table1.unwrap_or_default(),
                None => Table1Settings::default(),
            };
            let table = runner::table1(&settings)?;
            let file = File::create(&out).map_err(|e| Error::Io(format!("{}: {e}", out.display())))?;
            runner::write_table1_csv(&table, BufWriter::new(file))?;
            runner::write_table1_csv(&table, std::io::stdout())?;
        }
        Command::Compare { a, b, out } => {
            let report = runner::compare(&a, &b)?;
            if let Some(out) = out {
                let file = File::create(&out).map_err(|e| Error::Io(format!("{}: {e}", out.display())))?;
                runner::write_compare_csv(&report, BufWriter::new(file))?;
            }
            println!(
                "{}",
                serde_json::json!({
                    "seeds": report.seeds,
                    "final_loss_delta": { "mean": report.final_loss_mean, "std": report.final_loss_std },
                    "final_grad_norm_delta": { "mean": report.final_grad_norm_mean, "std": report.final_grad_norm_std },
                })
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", runner::error_json(&e));
            ExitCode::from(runner::exit_code(&e) as u8)
        }
    }
}
