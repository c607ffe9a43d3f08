//! `dpdiff`: train, diagnose, evaluate, ablate, and bound-report for the
//! DP-aware conditional diffusion engine.
//!
//! Exit code 0 on success; on failure a single machine-parseable line
//! `error: <message>` goes to stderr and the exit code is nonzero.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dpdiff_cli::commands::{
    cmd_ablate, cmd_bounds, cmd_diagnose, cmd_evaluate, cmd_train, AblateAxis, EvalTask,
};
use dpdiff_cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "dpdiff", about = "DP-aware conditional diffusion training and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training loop and persist checkpoint, gradient log, report.
    Train {
        /// Config file (flat key=value with [section] headers). Omit for
        /// the desk-profile defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Inline overrides of the form section.key=value.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Output directory for artifacts.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Compare a DP-vanilla and a DP-aware gradient log.
    Diagnose {
        /// Gradient log CSV of the vanilla run.
        #[arg(long)]
        vanilla: PathBuf,
        /// Gradient log CSV of the aware run.
        #[arg(long)]
        aware: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Sample from a checkpoint and score against held-out windows.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// interpolation (random + stride masks) or forecasting (block).
        #[arg(long)]
        task: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run a matched comparison grid along one axis.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// components | operator | tightness | clip_C
        #[arg(long)]
        axis: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Emit the sensitivity bound report for the configured limits.
    Bounds {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Steps of the non-private calibration run for references.
        #[arg(long, default_value_t = 100)]
        calibration_steps: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>, sets: &[String]) -> Result<RunConfig, String> {
    let mut text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| format!("reading config {}: {e}", p.display()))?,
        None => String::new(),
    };
    // Inline overrides append after the file so they win.
    for set in sets {
        let Some((key, value)) = set.split_once('=') else {
            return Err(format!("--set expects section.key=value, got `{set}`"));
        };
        let Some((section, k)) = key.split_once('.') else {
            return Err(format!("--set key must look like section.key, got `{key}`"));
        };
        text.push_str(&format!("\n[{section}]\n{k} = {value}\n"));
    }
    RunConfig::parse(&text).map_err(|e| e.to_string())
}

fn run() -> Result<(), String> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, sets, out } => {
            let cfg = load_config(&config, &sets)?;
            let artifacts = cmd_train(&cfg, &out).map_err(|e| e.to_string())?;
            println!("checkpoint: {}", artifacts.checkpoint.display());
            println!("grad_log: {}", artifacts.grad_log.display());
            println!("report: {}", artifacts.report.display());
            Ok(())
        }
        Command::Diagnose { vanilla, aware, out } => {
            let report = cmd_diagnose(&vanilla, &aware, &out).map_err(|e| e.to_string())?;
            print!("{report}");
            Ok(())
        }
        Command::Evaluate { checkpoint, task, out } => {
            let task = EvalTask::parse(&task).map_err(|e| e.to_string())?;
            let report = cmd_evaluate(&checkpoint, task, &out).map_err(|e| e.to_string())?;
            print!("{report}");
            Ok(())
        }
        Command::Ablate { config, sets, axis, out } => {
            let cfg = load_config(&config, &sets)?;
            let axis = AblateAxis::parse(&axis).map_err(|e| e.to_string())?;
            let report = cmd_ablate(&cfg, axis, &out).map_err(|e| e.to_string())?;
            print!("{report}");
            Ok(())
        }
        Command::Bounds { config, sets, calibration_steps, out } => {
            let cfg = load_config(&config, &sets)?;
            let report = cmd_bounds(&cfg, calibration_steps, &out).map_err(|e| e.to_string())?;
            print!("{report}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            // One line, machine-parseable.
            eprintln!("error: {}", msg.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
