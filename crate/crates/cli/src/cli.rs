//! Command-line surface.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::{self, ConsistencyArgs, GenDataArgs, SampleArgs};
use crate::config::SamplerKind;
use crate::error::{AppError, AppResult};
use crate::samplers::Direction;

#[derive(Parser)]
#[command(
    name = "cyclediff",
    about = "Paired conditional diffusion for cross-modality 3D volume translation"
)]
pub struct Cli {
    /// Worker thread count (default: CYCLEDIFF_THREADS or all cores).
    /// Never changes numerical results.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Experiment configuration file (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Master seed fallback for commands that take one.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

fn parse_triple(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("expected X,Y,Z".into());
    }
    let mut out = [0usize; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|e| format!("{e}"))?;
    }
    Ok(out)
}

fn parse_pair(s: &str) -> Result<[usize; 2], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err("expected MIN,MAX".into());
    }
    Ok([
        parts[0].trim().parse().map_err(|e| format!("{e}"))?,
        parts[1].trim().parse().map_err(|e| format!("{e}"))?,
    ])
}

fn parse_samplers(s: &str) -> Result<Vec<SamplerKind>, String> {
    s.split(',').map(|p| p.trim().parse()).collect()
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a paired phantom dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Volume extents as X,Y,Z.
        #[arg(long, value_parser = parse_triple)]
        extents: Option<[usize; 3]>,
        #[arg(long)]
        noise_sigma: Option<f32>,
        #[arg(long)]
        bias_amplitude: Option<f32>,
        /// Ellipsoid count range as MIN,MAX.
        #[arg(long, value_parser = parse_pair)]
        ellipsoids: Option<[usize; 2]>,
    },
    /// Train the two conditional denoisers (two-phase).
    Train {
        /// Continue from the latest checkpoint if present.
        #[arg(long)]
        resume: bool,
    },
    /// Synthesize the opposite modality for one volume.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        direction: Direction,
        #[arg(long, default_value = "cycle")]
        sampler: SamplerKind,
        #[arg(long, default_value_t = 1)]
        runs: usize,
        /// Reverse sampling steps (respacing target).
        #[arg(long, default_value_t = 16)]
        steps: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-window latent traces (cycle sampler only).
        #[arg(long)]
        save_trace: bool,
    },
    /// Compare predictions against ground truth volumes.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte-Carlo consistency study over repeated sampling runs.
    Consistency {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cases: PathBuf,
        #[arg(long, default_value = "a2b")]
        direction: Direction,
        /// Comma-separated sampler list.
        #[arg(long, value_parser = parse_samplers, default_value = "cycle,ancestral")]
        samplers: Vec<SamplerKind>,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long, default_value_t = 16)]
        steps: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Use only the first N cases.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Dispatches a parsed invocation.
pub fn run(cli: Cli) -> AppResult<()> {
    let global_seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::GenData {
            out,
            count,
            seed,
            extents,
            noise_sigma,
            bias_amplitude,
            ellipsoids,
        } => commands::cmd_gen_data(&GenDataArgs {
            out,
            count,
            seed: seed.unwrap_or(global_seed),
            extents,
            noise_sigma,
            bias_amplitude,
            ellipsoids,
        }),
        Command::Train { resume } => {
            let config = cli
                .config
                .ok_or_else(|| AppError::config("train requires --config"))?;
            commands::cmd_train(&config, resume)
        }
        Command::Sample {
            checkpoint,
            input,
            direction,
            sampler,
            runs,
            steps,
            seed,
            out,
            save_trace,
        } => commands::cmd_sample(&SampleArgs {
            checkpoint,
            input,
            direction,
            sampler,
            runs,
            steps,
            seed: seed.unwrap_or(global_seed),
            out,
            save_trace,
        }),
        Command::Evaluate { pred, truth, out } => commands::cmd_evaluate(&pred, &truth, &out),
        Command::Consistency {
            checkpoint,
            cases,
            direction,
            samplers,
            runs,
            steps,
            seed,
            limit,
            out,
        } => commands::cmd_consistency(&ConsistencyArgs {
            checkpoint,
            cases_dir: cases,
            direction,
            samplers,
            runs,
            steps,
            seed: seed.unwrap_or(global_seed),
            limit,
            out,
        }),
    }
}
