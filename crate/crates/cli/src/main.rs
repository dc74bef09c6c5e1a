use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use bmd_cli::commands::{cmd_ablate, cmd_gen_data, cmd_label, cmd_run, LabelMethod, LabelParams};
use bmd_cli::config::{load_run_config, RunConfigFile};
use bmd_core::engine::Strategy;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bmd", version, about = "Class-balanced multicentric pseudo-labeling for source-free adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pseudo-label an exported feature bank.
    Label {
        /// Feature bank file (BMDFB1 text format).
        input: PathBuf,
        #[arg(long, default_value = "bmd-static")]
        strategy: LabelMethod,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Selection ratio r.
        #[arg(long, default_value_t = 3.0)]
        ratio: f64,
        /// Prototypes per class S (bmp, bmd-static).
        #[arg(long, default_value_t = 4)]
        prototypes: usize,
        #[arg(long, default_value_t = 2)]
        rounds: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Source training plus one adaptation run on the benchmark.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Compare strategies over several seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// First seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of seeds (overrides the config).
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Write the benchmark target set, as seen by the source model, as a feature bank.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn load(config: Option<PathBuf>) -> Result<RunConfigFile> {
    match config {
        Some(p) => load_run_config(&p),
        None => Ok(RunConfigFile::default()),
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("BMD_THREADS") {
        let n: usize = v.parse().ok().filter(|&n| n > 0).with_context(|| format!("BMD_THREADS must be a positive integer, got '{v}'"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Label {
            input,
            strategy,
            seed,
            ratio,
            prototypes,
            rounds,
            out,
        } => {
            let params = LabelParams {
                method: strategy,
                ratio,
                prototypes,
                rounds,
                seed,
            };
            let outcome = cmd_label(&input, &params, &out)?;
            println!("wrote {}", outcome.path.display());
            if let Some(acc) = outcome.accuracy {
                println!("pseudo-label accuracy {:.4}", acc);
            }
        }
        Command::Run { config, seed, strategy, out } => {
            let record = cmd_run(&load(config)?, seed, strategy, &out)?;
            if let Some(m) = &record.final_metrics {
                println!("{}: accuracy {:.4} cv {:.4}", record.strategy, m.overall_accuracy, m.coefficient_of_variation);
            }
            println!("wrote {}", out.display());
        }
        Command::Ablate { config, seed, seeds, out } => {
            let table = cmd_ablate(&load(config)?, seed, seeds, &out)?;
            for r in std::iter::once(&table.source).chain(&table.rows) {
                println!("{:<7} accuracy {:.4} ± {:.4} cv {:.4}", r.name, r.accuracy_mean, r.accuracy_std, r.cv_mean);
            }
            println!("wrote {}", out.display());
        }
        Command::GenData { config, seed, out } => {
            let path = cmd_gen_data(&load(config)?, seed, &out)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn one_line(text: &str) -> String {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = one_line(&e.render().to_string());
            eprintln!("error: {}", msg.trim_start_matches("error:").trim());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
