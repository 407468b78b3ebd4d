use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use hunter_core::exec::{init_workers_from_env, Execution};
use hunter_core::pipeline::{self, Outcome, PipelineConfig};
use hunter_core::toy::{write_toy_dataset, ToyConfig};

/// Synthetic LiDAR human data generation, pseudo-label filtering and
/// evaluation. Worker count comes from `HUNTER_WORKERS`.
#[derive(Parser, Debug)]
#[command(name = "hunter-forge", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML pipeline config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or folder.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Manifest path, overriding the config.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Run every loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit ground planes and vacant-ground masks for every manifest frame.
    SegmentGround,
    /// Insert simulated humans into base frames.
    Forge {
        #[arg(long, default_value_t = 100)]
        frames: usize,
        /// Asset folder, overriding the config.
        #[arg(long)]
        assets: Option<PathBuf>,
    },
    /// Bi-directional tracking filter over a detections file.
    Filter {
        #[arg(long)]
        detections: PathBuf,
    },
    /// Expand receptive-field masks around pseudo-labels.
    UpdateMask {
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Center-distance AP of detections against ground truth.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Evaluate loss values and gradients for serialized tensors.
    Losscheck {
        #[arg(long)]
        tensors: PathBuf,
    },
    /// Write the procedurally generated toy dataset.
    ToyDataset {
        #[arg(long)]
        sequences: Option<usize>,
        #[arg(long)]
        frames_per_sequence: Option<usize>,
    },
}

fn out_or(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn load_config(common: &Common) -> anyhow::Result<PipelineConfig> {
    let base = match &common.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    let mut cfg = base.effective(common.seed)?;
    if let Some(m) = &common.manifest {
        cfg.manifest = Some(m.clone());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    let workers = init_workers_from_env();
    let exec = if cli.common.sequential { Execution::Sequential } else { Execution::default() };
    log::info!("workers: {}", if exec.is_parallel() { workers } else { 1 });

    if let Command::ToyDataset { sequences, frames_per_sequence } = &cli.command {
        let mut toy = ToyConfig::default();
        if let Some(s) = cli.common.seed {
            toy.seed = s;
        }
        toy.sequences = sequences.unwrap_or(toy.sequences);
        toy.frames = frames_per_sequence.unwrap_or(toy.frames);
        log::info!("toy config: {}", serde_json::to_string(&toy)?);
        let root = out_or(&cli.common, "toy");
        let s = write_toy_dataset(&root, &toy, exec)?;
        return Ok(Outcome {
            outputs: vec![s.manifest.clone(), s.config.clone()],
            warnings: vec![],
            message: format!("{} frames, {} ground-truth boxes under {}", s.frames, s.gt_boxes, s.root.display()),
        });
    }

    let mut cfg = load_config(&cli.common)?;
    if let Command::Forge { assets: Some(a), .. } = &cli.command {
        cfg.assets = Some(a.clone());
    }
    log::info!("effective config: {}", serde_json::to_string(&cfg.to_json())?);
    let c = &cli.common;
    Ok(match &cli.command {
        Command::SegmentGround => pipeline::cmd_segment_ground(&cfg, &out_or(c, "ground-out"), exec)?,
        Command::Forge { frames, .. } => pipeline::cmd_forge(&cfg, *frames, &out_or(c, "corpus"), exec)?,
        Command::Filter { detections } => pipeline::cmd_filter(&cfg, detections, &out_or(c, "filtered.jsonl"), exec)?,
        Command::UpdateMask { masks, labels } => pipeline::cmd_update_mask(&cfg, masks, labels, &out_or(c, "masks-updated"))?,
        Command::Eval { detections, gt } => pipeline::cmd_eval(&cfg, detections, gt, &out_or(c, "report.json"))?.0,
        Command::Losscheck { tensors } => pipeline::cmd_losscheck(&cfg, tensors, &out_or(c, "losses.json"))?.0,
        Command::ToyDataset { .. } => unreachable!("handled above"),
    })
}

fn print_outputs(outputs: &[PathBuf]) {
    for p in outputs.iter().take(8) {
        println!("wrote {}", Path::new(p).display());
    }
    if outputs.len() > 8 {
        println!("... and {} more", outputs.len() - 8);
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(o) => {
            if !o.message.is_empty() {
                println!("{}", o.message.trim_end());
            }
            print_outputs(&o.outputs);
            if o.is_partial() {
                for w in &o.warnings {
                    eprintln!("warning: {w}");
                }
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
