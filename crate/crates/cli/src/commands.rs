//! The `finetune` and `inpaint` commands.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use inpaint_core::backbone::{load_checkpoint, save_checkpoint, ParameterSet, Preset};
use inpaint_core::codec::{ImageBuffer, LatentMap, LatentCodec, RegionMask};
use inpaint_core::finetune::{FinetuneConfig, LossRecord, DEFAULT_ITERS, DEFAULT_LEARNING_RATE};
use inpaint_core::guidance::{GuidanceSpec, DEFAULT_SCALE, DEFAULT_TAU};
use inpaint_core::metrics::MetricReport;
use inpaint_core::pipeline::{codec_for, run_inpaint, stroke_for, InpaintOutput, PipelineConfig};
use inpaint_core::raster::{load_mask, load_rgb, load_rgba, save_png};
use inpaint_core::sampler::{SamplerConfig, StepEvent};
use serde::Serialize;

use crate::error::{runtime, CliError, CliResult};

pub const DEFAULT_STEPS: usize = 50;

fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} file {} does not exist", path.display())))
    }
}

fn input<T>(path: &Path, what: &str, load: fn(&Path) -> inpaint_core::Result<T>) -> CliResult<T> {
    require(path, what)?;
    load(path).map_err(|e| CliError::Usage(format!("cannot read {what} {}: {e}", path.display())))
}

pub fn load_image(path: &Path) -> CliResult<ImageBuffer> {
    input(path, "image", load_rgb)
}

pub fn load_region_mask(path: &Path) -> CliResult<RegionMask> {
    input(path, "mask", load_mask)
}

pub fn load_params(path: &Path) -> CliResult<ParameterSet> {
    require(path, "checkpoint")?;
    Ok(load_checkpoint(path)?)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    write_file(path, text.as_bytes())
}

/// Inputs for one finetuning run.
#[derive(Debug, Clone)]
pub struct FinetuneArgs {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub exemplar: Option<PathBuf>,
    pub iters: u64,
    pub lr: f64,
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub out: PathBuf,
}

impl FinetuneArgs {
    pub fn new(image: PathBuf, mask: PathBuf, out: PathBuf) -> Self {
        Self {
            image,
            mask,
            exemplar: None,
            iters: DEFAULT_ITERS,
            lr: DEFAULT_LEARNING_RATE,
            seed: 0,
            pipeline: PipelineConfig::default(),
            out,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FinetuneManifest {
    pub command: &'static str,
    pub checkpoint: PathBuf,
    pub losses: PathBuf,
    pub manifest: PathBuf,
    pub iterations: u64,
    pub learning_rate: f64,
    pub seed: u64,
    pub preset: Preset,
    pub codec_factor: usize,
    pub subject_token: Option<u32>,
    pub final_loss: Option<f64>,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn write_losses(path: &Path, history: &[LossRecord]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    w.write_record(["iteration", "bg", "reference", "total", "elapsed_ms"])
        .map_err(runtime)?;
    for r in history {
        w.write_record([
            r.iteration.to_string(),
            r.bg.to_string(),
            r.reference.map(|v| v.to_string()).unwrap_or_default(),
            r.total.to_string(),
            r.elapsed.as_millis().to_string(),
        ])
        .map_err(runtime)?;
    }
    w.flush().map_err(runtime)
}

/// Finetunes fresh base parameters on one image and writes the checkpoint,
/// a loss log (`<out>.losses.csv`) and a manifest (`<out>.manifest.json`).
pub fn finetune(args: &FinetuneArgs, progress: bool) -> CliResult<FinetuneManifest> {
    let image = load_image(&args.image)?;
    let mask = load_region_mask(&args.mask)?;
    let exemplar = args
        .exemplar
        .as_deref()
        .map(|p| input(p, "exemplar", load_rgb))
        .transpose()?;
    let cfg = FinetuneConfig {
        total_iters: args.iters,
        learning_rate: args.lr,
        seed: args.seed,
        ..FinetuneConfig::default()
    };
    cfg.validate()?;
    let inputs = args.pipeline.prepare(&image, &mask, exemplar.as_ref())?;
    let total = args.iters;
    let mut report = |r: &LossRecord| {
        let i = r.iteration + 1;
        if progress && (i.is_multiple_of(10) || i == total) {
            eprintln!("finetune {i}/{total} loss={:.6}", r.total);
        }
    };
    let (params, history) = args.pipeline.finetune(&inputs, &cfg, Some(&mut report))?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_checkpoint(&params, &args.out)?;
    let losses = sibling(&args.out, ".losses.csv");
    write_losses(&losses, &history)?;
    let manifest = FinetuneManifest {
        command: "finetune",
        checkpoint: args.out.clone(),
        losses,
        manifest: sibling(&args.out, ".manifest.json"),
        iterations: params.finetune_iters,
        learning_rate: args.lr,
        seed: args.seed,
        preset: args.pipeline.preset,
        codec_factor: args.pipeline.codec_factor,
        subject_token: inputs.exemplar.as_ref().map(|e| e.subject_token),
        final_loss: history.last().map(|r| r.total),
    };
    write_json(&manifest.manifest, &manifest)?;
    Ok(manifest)
}

/// Inputs for one inpainting run.
#[derive(Debug, Clone)]
pub struct InpaintArgs {
    pub checkpoint: PathBuf,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub text: Option<String>,
    pub exemplar_token: Option<u32>,
    pub stroke: Option<PathBuf>,
    pub tau: Option<f64>,
    pub scale: f64,
    pub steps: usize,
    pub seed: u64,
    pub n: usize,
    pub attn_mask: bool,
    pub outdir: PathBuf,
}

impl InpaintArgs {
    pub fn new(checkpoint: PathBuf, image: PathBuf, mask: PathBuf, outdir: PathBuf) -> Self {
        Self {
            checkpoint,
            image,
            mask,
            text: None,
            exemplar_token: None,
            stroke: None,
            tau: None,
            scale: DEFAULT_SCALE,
            steps: DEFAULT_STEPS,
            seed: 0,
            n: 1,
            attn_mask: true,
            outdir,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InpaintManifest {
    pub command: &'static str,
    pub outputs: Vec<PathBuf>,
    pub metrics_json: PathBuf,
    pub metrics_txt: PathBuf,
    pub manifest: PathBuf,
    pub mode: String,
    pub steps: usize,
    /// Sampler steps actually run, summed over outputs.
    pub steps_executed: usize,
    /// Steps that ran classifier-free guidance, summed over outputs.
    pub cfg_steps: usize,
    /// Timestep the stroke latent was injected at.
    pub stroke_injected_at: Option<usize>,
    pub scale: f64,
    pub tau: Option<f64>,
    pub seed: u64,
    pub n: usize,
    pub attn_mask: bool,
    pub finetune_iters: u64,
    pub known_region: MetricReport,
    pub stroke_rmse: Option<MetricReport>,
}

/// Result of [`run_job`] with counts gathered while sampling.
pub struct JobRun {
    pub output: InpaintOutput,
    pub mode: String,
    pub steps_executed: usize,
    pub cfg_steps: usize,
    pub stroke_injected_at: Option<usize>,
}

/// Runs one job without writing anything; shared by `inpaint` and `sweep`.
pub fn run_job(
    params: Arc<ParameterSet>,
    image: &ImageBuffer,
    mask: &RegionMask,
    stroke_rgba: Option<&ImageBuffer>,
    args: &InpaintArgs,
) -> CliResult<JobRun> {
    let codec = codec_for(params.config())?;
    let pipeline = PipelineConfig {
        codec_factor: codec.factor(),
        ..PipelineConfig::default()
    };
    let inputs = pipeline.prepare(image, mask, None)?;
    let stroke = stroke_rgba.map(|s| stroke_for(&params, s)).transpose()?;
    let spec = GuidanceSpec {
        prompt: args.text.clone(),
        subject_token: args.exemplar_token,
        stroke,
        tau: args.tau,
        scale: Some(args.scale),
        seed: args.seed,
        num_outputs: args.n,
    };
    let mode = format!("{:?}", inpaint_core::guidance::validate_spec(&spec, mask)?.mode()).to_lowercase();
    let sampler = SamplerConfig {
        num_steps: args.steps,
        attn_mask_enabled: args.attn_mask,
        ..SamplerConfig::default()
    };
    let steps = AtomicUsize::new(0);
    let cfg_steps = AtomicUsize::new(0);
    let injected = Mutex::new(None);
    let observer = |e: &StepEvent, _: &LatentMap| {
        steps.fetch_add(1, Ordering::Relaxed);
        if e.cfg {
            cfg_steps.fetch_add(1, Ordering::Relaxed);
        }
        if e.stroke_blended {
            *injected.lock().unwrap() = Some(e.t_prev);
        }
    };
    let output = run_inpaint(params, &inputs, &spec, &sampler, Some(&observer))?;
    Ok(JobRun {
        output,
        mode,
        steps_executed: steps.into_inner(),
        cfg_steps: cfg_steps.into_inner(),
        stroke_injected_at: injected.into_inner().unwrap(),
    })
}

/// Inpaints with a checkpoint and writes `output_<i>.png`, `metrics.json`,
/// `metrics.txt` and `manifest.json` into the output directory.
pub fn inpaint(args: &InpaintArgs) -> CliResult<InpaintManifest> {
    let image = load_image(&args.image)?;
    let mask = load_region_mask(&args.mask)?;
    let stroke = args
        .stroke
        .as_deref()
        .map(|p| input(p, "stroke", load_rgba))
        .transpose()?;
    let params = Arc::new(load_params(&args.checkpoint)?);
    let finetune_iters = params.finetune_iters;
    let JobRun {
        output: out,
        mode,
        steps_executed,
        cfg_steps,
        stroke_injected_at,
    } = run_job(params, &image, &mask, stroke.as_ref(), args)?;

    create_dir(&args.outdir)?;
    let mut outputs = Vec::new();
    for (i, img) in out.images.iter().enumerate() {
        let path = args.outdir.join(format!("output_{i}.png"));
        save_png(img, &path)?;
        outputs.push(path);
    }
    let reports: Vec<&MetricReport> = std::iter::once(&out.known_region).chain(out.stroke_rmse.as_ref()).collect();
    let metrics_json = args.outdir.join("metrics.json");
    write_json(&metrics_json, &reports)?;
    let metrics_txt = args.outdir.join("metrics.txt");
    let mut txt = Vec::new();
    for r in &reports {
        writeln!(txt, "{}", r.to_lines().trim_end()).map_err(runtime)?;
    }
    write_file(&metrics_txt, &txt)?;
    let manifest = InpaintManifest {
        command: "inpaint",
        outputs,
        metrics_json,
        metrics_txt,
        manifest: args.outdir.join("manifest.json"),
        mode,
        steps: args.steps,
        steps_executed,
        cfg_steps,
        stroke_injected_at,
        scale: args.scale,
        tau: stroke.as_ref().map(|_| args.tau.unwrap_or(DEFAULT_TAU)),
        seed: args.seed,
        n: args.n,
        attn_mask: args.attn_mask,
        finetune_iters,
        known_region: out.known_region,
        stroke_rmse: out.stroke_rmse,
    };
    write_json(&manifest.manifest, &manifest)?;
    Ok(manifest)
}
