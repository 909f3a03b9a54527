use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use segproto::kv;
use segproto::{Error, Result};

mod commands;
mod config;

use config::{parse_override, RunConfig};

/// Segmentation-gated few-shot lesion classification.
#[derive(Parser, Debug)]
#[command(name = "segproto", version)]
struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override, global = true)]
    set: Vec<(String, String)>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Jointly train segmenter and encoder on the seen classes.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// E1 (frozen segmenter), E2 (segmenter trained) or baseline (no
        /// segmentation).
        #[arg(long)]
        mode: Option<String>,
        /// Loss weight of the classification term.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Evaluate a checkpoint on unseen-class episodes.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Shot counts to sweep, e.g. 1,3,5.
        #[arg(long, value_delimiter = ',')]
        shots: Vec<usize>,
        /// Episodes per evaluation (100 for accuracy tables, 1000 for CIs).
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Fused and raw-image Grad-CAM heatmaps for the given samples.
    Gradcam {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Baseline checkpoint for the raw-image map (default: the fused
        /// model's own encoder).
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(required = true)]
        ids: Vec<String>,
    },
    /// Finite-difference check of the standard network suite.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn resolve(cli: &Cli, extra: Vec<(String, String)>) -> Result<RunConfig> {
    let file = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            Some(kv::parse(&text)?)
        }
        None => None,
    };
    let mut overrides = cli.set.clone();
    overrides.extend(extra);
    RunConfig::resolve(file.as_ref(), &overrides)
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::GenData { out } => {
            let cfg = resolve(&cli, Vec::new())?;
            commands::gen_data(&cfg, out)?;
        }
        Command::Train {
            data,
            out,
            mode,
            lambda,
        } => {
            let mut extra = Vec::new();
            if let Some(m) = mode {
                extra.push(("mode".to_string(), m.clone()));
            }
            if let Some(l) = lambda {
                extra.push(("lambda".to_string(), l.to_string()));
            }
            let cfg = resolve(&cli, extra)?;
            commands::train(&cfg, data, out)?;
        }
        Command::Eval {
            data,
            checkpoint,
            out,
            shots,
            episodes,
        } => {
            let mut extra = Vec::new();
            if !shots.is_empty() {
                extra.push(("shots".to_string(), kv::join(shots)));
            }
            if let Some(t) = episodes {
                extra.push(("episodes".to_string(), t.to_string()));
            }
            let cfg = resolve(&cli, extra)?;
            commands::eval(&cfg, checkpoint, data, out)?;
        }
        Command::Gradcam {
            data,
            checkpoint,
            out,
            baseline,
            ids,
        } => {
            let cfg = resolve(&cli, Vec::new())?;
            commands::gradcam_cmd(&cfg, checkpoint, baseline.as_deref(), data, out, ids)?;
        }
        Command::Gradcheck { out, inject_fault } => {
            return commands::gradcheck(out.as_ref(), *inject_fault);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_runtime_abort() { 2 } else { 1 })
        }
    }
}
