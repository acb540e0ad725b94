use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use peg_core::error::{PegError, Result};
use peg_core::harness::{
    emit_report, evaluate_checkpoint, parse_formats, read_report, run_preset, to_json_lines, write_outputs,
    ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "peg", version, about = "Population-based evolutionary gaming on feature datasets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment preset and write its report.
    Run {
        /// crs-validation, peg, selection-ablation, brd-trace or smoke.
        #[arg(long)]
        preset: Option<String>,
        /// JSON experiment config; preset defaults are used without one.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated report formats.
        #[arg(long)]
        format: Option<String>,
        /// Continue evolution runs from their latest checkpoints.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate every member of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Re-emit a stored report in other formats.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "csv,json,svg")]
        format: String,
    },
}

fn config(preset: Option<String>, path: Option<PathBuf>) -> Result<ExperimentConfig> {
    match (preset, path) {
        (None, None) => Err(PegError::Config("either --preset or --config is required".into())),
        (Some(name), None) => ExperimentConfig::preset(&name),
        (name, Some(path)) => {
            let cfg = ExperimentConfig::load(&path)?;
            match name {
                Some(name) if name != cfg.preset => Err(PegError::Config(format!(
                    "--preset {name} disagrees with preset `{}` in {}",
                    cfg.preset,
                    path.display()
                ))),
                _ => Ok(cfg),
            }
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run {
            preset,
            config: path,
            seed,
            out,
            format,
            resume,
        } => {
            let mut cfg = config(preset, path)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            if let Some(list) = format {
                cfg.formats = parse_formats(&list)?;
            }
            cfg.validate()?;
            let report = run_preset(&cfg, resume)?;
            for path in write_outputs(&cfg, &report)? {
                println!("{}", path.display());
            }
        }
        Command::Eval { checkpoint, dataset } => {
            let records = evaluate_checkpoint(&checkpoint, &dataset)?;
            print!("{}", String::from_utf8_lossy(&to_json_lines(&records)?));
        }
        Command::Report { input, format } => {
            let formats = parse_formats(&format)?;
            let report = read_report(&input)?;
            for path in emit_report(&report, &input, &formats)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
