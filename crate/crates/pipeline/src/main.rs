use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scenekd_pipeline::budget::report_complexity;
use scenekd_pipeline::config::resolve;
use scenekd_pipeline::phases::{run_all, run_phase, Phase, PhaseStatus, Workspace};
use scenekd_pipeline::{PipelineError, Result};

#[derive(Debug, Parser)]
#[command(name = "scenekd", version, about = "Ensemble-guided distillation of compact scene classifiers")]
struct Cli {
    /// JSON config merged over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Starting point: default, desk or smoke.
    #[arg(long, global = true, default_value = "default")]
    preset: String,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Dotted-path override, e.g. `--set kd.alpha=0.7` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Compute in float64 (bitwise-reproducible test mode).
    #[arg(long, global = true)]
    float64: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    GenData,
    TrainTeachers,
    TrainCombiners,
    Distill,
    Quantize,
    Evaluate,
    /// Parameter/MAC budget verdict.
    ReportComplexity {
        /// Report teacher `N` of the configured pool instead of the student.
        #[arg(long, value_name = "N")]
        teacher: Option<usize>,
        /// Print the full JSON report.
        #[arg(long)]
        json: bool,
    },
    /// Every phase in order; completed phases with unchanged config are skipped.
    RunAll,
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.preset, cli.config.as_deref(), &cli.sets, cli.seed, cli.float64)?;
    let phase = match cli.command {
        Command::ReportComplexity { teacher, json } => {
            let v = report_complexity(&cfg, teacher)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&v).expect("verdict serializes"));
            } else {
                println!("{}", v.summary());
            }
            return Ok(());
        }
        Command::RunAll => None,
        Command::GenData => Some(Phase::GenData),
        Command::TrainTeachers => Some(Phase::TrainTeachers),
        Command::TrainCombiners => Some(Phase::TrainCombiners),
        Command::Distill => Some(Phase::Distill),
        Command::Quantize => Some(Phase::Quantize),
        Command::Evaluate => Some(Phase::Evaluate),
    };
    std::fs::create_dir_all(&cli.out).map_err(|e| PipelineError::io(&cli.out, e))?;
    let text = serde_json::to_vec_pretty(&cfg.to_value()).expect("config serializes");
    scenekd_core::archive::write_atomic(cli.out.join("config.json"), &text)?;
    let ws = Workspace::new(&cli.out, cfg);
    let done = match phase {
        Some(p) => vec![(p, run_phase(&ws, p)?)],
        None => run_all(&ws)?,
    };
    for (p, status) in done {
        let s = match status {
            PhaseStatus::Ran => "done",
            PhaseStatus::UpToDate => "up to date",
        };
        println!("{p}: {s}");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
