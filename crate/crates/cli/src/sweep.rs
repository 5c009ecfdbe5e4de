//! Cartesian parameter sweeps with resumable cells and one summary table.
//!
//! ```toml
//! image = "photo.png"
//! mask = "mask.png"
//! stroke = "stroke.png"     # optional
//! exemplar = "dog.png"      # optional; its token guides every cell
//! text = "a red hat"        # optional
//! preset = "small"
//! codec_factor = 8
//!
//! [base]                    # values for every cell unless swept
//! iters = 100
//! steps = 50
//!
//! [axes]
//! tau = [0.4, 0.5, 0.6, 0.7, 0.8]
//! seed = [0, 1]
//! ```
//!
//! Swept axes are `tau`, `seed`, `attn_mask`, `iters` and `scale`. Cells run
//! in axis-name order; each finished cell leaves `cells/<name>/done.json`, so
//! rerunning the same sweep only computes the missing cells. Finetuning is
//! shared between cells with the same iteration count.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use inpaint_core::backbone::{load_checkpoint, Preset};
use inpaint_core::finetune::{DEFAULT_ITERS, DEFAULT_LEARNING_RATE};
use inpaint_core::guidance::DEFAULT_SCALE;
use inpaint_core::pipeline::PipelineConfig;
use inpaint_core::raster::{load_rgb, load_rgba, save_png};
use serde::{Deserialize, Serialize};

use crate::commands::{
    finetune, load_image, load_region_mask, run_job, write_json, FinetuneArgs, InpaintArgs, DEFAULT_STEPS,
};
use crate::error::{runtime, CliError, CliResult};

pub const AXES: [&str; 5] = ["attn_mask", "iters", "scale", "seed", "tau"];

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub image: PathBuf,
    pub mask: PathBuf,
    #[serde(default)]
    pub stroke: Option<PathBuf>,
    #[serde(default)]
    pub exemplar: Option<PathBuf>,
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub preset: Preset,
    #[serde(default = "default_factor")]
    pub codec_factor: usize,
    #[serde(default)]
    pub base: BaseValues,
    #[serde(default)]
    pub axes: BTreeMap<String, Vec<toml::Value>>,
}

fn default_factor() -> usize {
    PipelineConfig::default().codec_factor
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseValues {
    pub iters: u64,
    pub lr: f64,
    pub finetune_seed: u64,
    pub steps: usize,
    pub scale: f64,
    pub tau: Option<f64>,
    pub seed: u64,
    pub n: usize,
    pub attn_mask: bool,
}

impl Default for BaseValues {
    fn default() -> Self {
        Self {
            iters: DEFAULT_ITERS,
            lr: DEFAULT_LEARNING_RATE,
            finetune_seed: 0,
            steps: DEFAULT_STEPS,
            scale: DEFAULT_SCALE,
            tau: None,
            seed: 0,
            n: 1,
            attn_mask: true,
        }
    }
}

/// One point of the sweep grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub name: String,
    pub values: BaseValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: String,
    pub iters: u64,
    pub seed: u64,
    pub tau: Option<f64>,
    pub scale: f64,
    pub attn_mask: bool,
    pub outputs: usize,
    pub known_region_max: f64,
    pub stroke_rmse_mean: Option<f64>,
    pub stroke_rmse_stddev: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepManifest {
    pub command: &'static str,
    pub summary: PathBuf,
    pub manifest: PathBuf,
    pub cells: usize,
    pub computed: usize,
    pub resumed: usize,
    pub checkpoints: Vec<PathBuf>,
}

impl SweepConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read sweep config {}: {e}", path.display())))?;
        let mut cfg: Self =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("sweep config: {e}")))?;
        let dir = path.parent().unwrap_or(Path::new(""));
        for p in [Some(&mut cfg.image), Some(&mut cfg.mask), cfg.stroke.as_mut(), cfg.exemplar.as_mut()]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Expands the axes into the full grid of cells.
    pub fn cells(&self) -> CliResult<Vec<Cell>> {
        let mut cells = vec![Cell {
            name: String::new(),
            values: self.base.clone(),
        }];
        for (axis, values) in &self.axes {
            if !AXES.contains(&axis.as_str()) {
                return Err(CliError::Usage(format!(
                    "sweep config: unknown axis `{axis}` (expected one of {})",
                    AXES.join(", ")
                )));
            }
            if values.is_empty() {
                return Err(CliError::Usage(format!("sweep config: axis `{axis}` has no values")));
            }
            let mut next = Vec::with_capacity(cells.len() * values.len());
            for cell in &cells {
                for v in values {
                    let mut c = cell.clone();
                    set_axis(&mut c.values, axis, v)?;
                    let label = format!("{axis}={}", v);
                    c.name = if c.name.is_empty() { label } else { format!("{}_{label}", c.name) };
                    next.push(c);
                }
            }
            cells = next;
        }
        if cells.len() == 1 && cells[0].name.is_empty() {
            cells[0].name = "base".into();
        }
        Ok(cells)
    }
}

fn set_axis(values: &mut BaseValues, axis: &str, v: &toml::Value) -> CliResult<()> {
    let bad = || CliError::Usage(format!("sweep config: axis `{axis}` cannot take value {v}"));
    let float = || v.as_float().or_else(|| v.as_integer().map(|i| i as f64)).ok_or_else(bad);
    let uint = || v.as_integer().filter(|i| *i >= 0).map(|i| i as u64).ok_or_else(bad);
    match axis {
        "tau" => values.tau = Some(float()?),
        "scale" => values.scale = float()?,
        "seed" => values.seed = uint()?,
        "iters" => values.iters = uint()?,
        "attn_mask" => values.attn_mask = v.as_bool().ok_or_else(bad)?,
        _ => unreachable!("axis names are checked first"),
    }
    Ok(())
}

fn read_done(path: &Path) -> Option<CellResult> {
    let text = std::fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

/// Runs every cell not already marked done, with at most `jobs` cells at a
/// time, and writes `summary.csv` and `manifest.json` into `out`.
pub fn sweep(config_path: &Path, out: &Path, jobs: usize) -> CliResult<SweepManifest> {
    if jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let cfg = SweepConfig::load(config_path)?;
    let cells = cfg.cells()?;
    let image = load_image(&cfg.image)?;
    let mask = load_region_mask(&cfg.mask)?;
    let stroke = match &cfg.stroke {
        Some(p) if p.is_file() => Some(load_rgba(p)?),
        Some(p) => return Err(CliError::Usage(format!("stroke file {} does not exist", p.display()))),
        None => None,
    };
    if let Some(p) = &cfg.exemplar {
        if !p.is_file() {
            return Err(CliError::Usage(format!("exemplar file {} does not exist", p.display())));
        }
        load_rgb(p)?;
    }
    std::fs::create_dir_all(out.join("cells")).map_err(runtime)?;
    std::fs::create_dir_all(out.join("checkpoints")).map_err(runtime)?;

    let pipeline = PipelineConfig {
        preset: cfg.preset,
        codec_factor: cfg.codec_factor,
        ..PipelineConfig::default()
    };
    let pending: Vec<&Cell> = cells
        .iter()
        .filter(|c| read_done(&out.join("cells").join(&c.name).join("done.json")).is_none())
        .collect();

    // One checkpoint per distinct iteration count needed by pending cells.
    let mut iters: Vec<u64> = cells.iter().map(|c| c.values.iters).collect();
    iters.sort_unstable();
    iters.dedup();
    let ckpt_path = |n: u64| out.join("checkpoints").join(format!("iters-{n}.ckpt"));
    let checkpoints: Vec<PathBuf> = iters.iter().map(|n| ckpt_path(*n)).collect();
    let mut needed: Vec<u64> = pending.iter().map(|c| c.values.iters).collect();
    needed.sort_unstable();
    needed.dedup();
    let mut subject_token = None;
    let params: Mutex<HashMap<u64, Arc<_>>> = Mutex::new(HashMap::new());
    for n in needed {
        let path = ckpt_path(n);
        let manifest_path = path.with_file_name(format!("iters-{n}.ckpt.manifest.json"));
        if !path.is_file() || !manifest_path.is_file() {
            let mut args = FinetuneArgs::new(cfg.image.clone(), cfg.mask.clone(), path.clone());
            args.exemplar = cfg.exemplar.clone();
            args.iters = n;
            args.lr = cfg.base.lr;
            args.seed = cfg.base.finetune_seed;
            args.pipeline = pipeline;
            finetune(&args, false)?;
        }
        let manifest: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(&manifest_path).map_err(runtime)?,
        )
        .map_err(runtime)?;
        subject_token = manifest["subject_token"].as_u64().map(|t| t as u32);
        params.lock().unwrap().insert(n, Arc::new(load_checkpoint(&path)?));
    }

    let next = AtomicUsize::new(0);
    let failure: Mutex<Option<CliError>> = Mutex::new(None);
    let run_cell = |cell: &Cell| -> CliResult<()> {
        let dir = out.join("cells").join(&cell.name);
        std::fs::create_dir_all(&dir).map_err(runtime)?;
        let v = &cell.values;
        let p = params.lock().unwrap()[&v.iters].clone();
        let mut args = InpaintArgs::new(PathBuf::new(), cfg.image.clone(), cfg.mask.clone(), dir.clone());
        args.text = cfg.text.clone();
        args.exemplar_token = subject_token;
        args.tau = if stroke.is_some() { v.tau } else { None };
        args.scale = v.scale;
        args.steps = v.steps;
        args.seed = v.seed;
        args.n = v.n;
        args.attn_mask = v.attn_mask;
        let output = run_job(p, &image, &mask, stroke.as_ref(), &args)?.output;
        for (i, img) in output.images.iter().enumerate() {
            save_png(img, &dir.join(format!("output_{i}.png")))?;
        }
        let result = CellResult {
            cell: cell.name.clone(),
            iters: v.iters,
            seed: v.seed,
            tau: args.tau,
            scale: v.scale,
            attn_mask: v.attn_mask,
            outputs: output.images.len(),
            known_region_max: output.known_region.samples.iter().cloned().fold(0.0, f64::max),
            stroke_rmse_mean: output.stroke_rmse.as_ref().map(|r| r.mean),
            stroke_rmse_stddev: output.stroke_rmse.as_ref().map(|r| r.stddev),
        };
        // The marker goes last so an interrupted cell is recomputed.
        write_json(&dir.join("done.json"), &result)
    };
    std::thread::scope(|s| {
        for _ in 0..jobs.min(pending.len()) {
            s.spawn(|| loop {
                if failure.lock().unwrap().is_some() {
                    return;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cell) = pending.get(i) else { return };
                eprintln!("sweep cell {}", cell.name);
                if let Err(e) = run_cell(cell) {
                    failure.lock().unwrap().get_or_insert(e);
                    return;
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }

    let summary = out.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary).map_err(runtime)?;
    for cell in &cells {
        let done = out.join("cells").join(&cell.name).join("done.json");
        let result = read_done(&done).ok_or_else(|| runtime(format!("missing result {}", done.display())))?;
        w.serialize(result).map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;
    let manifest = SweepManifest {
        command: "sweep",
        summary,
        manifest: out.join("manifest.json"),
        cells: cells.len(),
        computed: pending.len(),
        resumed: cells.len() - pending.len(),
        checkpoints,
    };
    write_json(&manifest.manifest, &manifest)?;
    Ok(manifest)
}
