//! Batch front end: finetune and inpaint local files, and run ablation
//! sweeps. Every command prints a JSON manifest of what it wrote.

pub mod commands;
pub mod error;
pub mod sweep;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use inpaint_core::backbone::Preset;
use inpaint_core::finetune::{DEFAULT_ITERS, DEFAULT_LEARNING_RATE};
use inpaint_core::guidance::DEFAULT_SCALE;
use inpaint_core::pipeline::PipelineConfig;

pub use error::{CliError, CliResult};

use commands::{FinetuneArgs, InpaintArgs, DEFAULT_STEPS};

#[derive(Debug, Parser)]
#[command(name = "inpaint", version, about = "Masked finetuning and guided inpainting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Tiny,
    Small,
    Medium,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Tiny => Preset::Tiny,
            PresetArg::Small => Preset::Small,
            PresetArg::Medium => Preset::Medium,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Finetune the base model on one image and write a checkpoint.
    Finetune {
        #[arg(long)]
        image: PathBuf,
        /// Grayscale mask, white = known.
        #[arg(long)]
        mask: PathBuf,
        /// Exemplar image of the subject to place in the hole.
        #[arg(long)]
        exemplar: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_ITERS)]
        iters: u64,
        #[arg(long, default_value_t = DEFAULT_LEARNING_RATE)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "small")]
        preset: PresetArg,
        /// Space-to-depth factor of the latent codec.
        #[arg(long, default_value_t = 8)]
        codec_factor: usize,
        /// Seed of the base parameters.
        #[arg(long, default_value_t = 0)]
        init_seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Inpaint with a finetuned checkpoint.
    Inpaint {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        text: Option<String>,
        /// Vocabulary id of the subject token (as reported by `finetune`).
        #[arg(long)]
        exemplar_token: Option<u32>,
        /// RGBA stroke layer; alpha > 0 marks painted pixels.
        #[arg(long)]
        stroke: Option<PathBuf>,
        /// Stroke injection point in [0, 1]; 0.55 when a stroke is given.
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, default_value_t = DEFAULT_SCALE)]
        scale: f64,
        #[arg(long, default_value_t = DEFAULT_STEPS)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long, value_enum, default_value = "on")]
        attn_mask: Switch,
        #[arg(long)]
        outdir: PathBuf,
    },
    /// Run a cartesian sweep described by a TOML file.
    Sweep {
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value = "sweep-out")]
        out: PathBuf,
    },
}

/// Runs a parsed command and returns its manifest as JSON.
pub fn run(cli: Cli) -> CliResult<serde_json::Value> {
    let to_json = |v: Result<serde_json::Value, serde_json::Error>| v.map_err(error::runtime);
    match cli.command {
        Command::Finetune {
            image,
            mask,
            exemplar,
            iters,
            lr,
            seed,
            preset,
            codec_factor,
            init_seed,
            out,
            quiet,
        } => {
            let args = FinetuneArgs {
                exemplar,
                iters,
                lr,
                seed,
                pipeline: PipelineConfig {
                    preset: preset.into(),
                    codec_factor,
                    init_seed,
                    ..PipelineConfig::default()
                },
                ..FinetuneArgs::new(image, mask, out)
            };
            to_json(serde_json::to_value(commands::finetune(&args, !quiet)?))
        }
        Command::Inpaint {
            checkpoint,
            image,
            mask,
            text,
            exemplar_token,
            stroke,
            tau,
            scale,
            steps,
            seed,
            n,
            attn_mask,
            outdir,
        } => {
            let args = InpaintArgs {
                text,
                exemplar_token,
                stroke,
                tau,
                scale,
                steps,
                seed,
                n,
                attn_mask: attn_mask == Switch::On,
                ..InpaintArgs::new(checkpoint, image, mask, outdir)
            };
            to_json(serde_json::to_value(commands::inpaint(&args)?))
        }
        Command::Sweep { config, jobs, out } => to_json(serde_json::to_value(sweep::sweep(&config, &out, jobs)?)),
    }
}
