//! End-to-end steps shared by every front end: input preparation, base
//! parameters, finetuning a session and running one inpainting job. The CLI
//! and the HTTP service both go through these functions, so identical inputs
//! give identical bytes out of either.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, DiffusionModel, ParameterSet, Preset};
use crate::codec::{downsample_mask, ImageBuffer, LatentCodec, LatentMap, RegionMask, SpaceToDepth};
use crate::error::{Error, Result};
use crate::finetune::{run_finetune, ExemplarBundle, FinetuneConfig, LossRecord};
use crate::guidance::{auto_subject_token, validate_spec, GuidanceSpec, StrokeMap, TokenTable, ToyJointEmbedder};
use crate::metrics::{known_region_error, stroke_rmse, MetricReport};
use crate::sampler::{inpaint, SampleObserver, SamplerConfig};
use crate::schedule::NoiseSchedule;

/// Model-independent settings every session is created with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub preset: Preset,
    pub codec_factor: usize,
    /// Seed of the base parameters every session starts finetuning from.
    pub init_seed: u64,
    pub embedder_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Small,
            codec_factor: 8,
            init_seed: 0,
            embedder_seed: 0,
        }
    }
}

/// Exemplar image with its latent and retrieved subject token.
#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    pub image: ImageBuffer,
    pub latent: LatentMap,
    pub subject_token: u32,
}

/// Validated session inputs at pixel and latent resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedInputs {
    pub image: ImageBuffer,
    pub mask: RegionMask,
    pub x_in: LatentMap,
    pub latent_mask: RegionMask,
    pub exemplar: Option<Exemplar>,
}

/// Images and metrics produced by one job.
#[derive(Debug, Clone, PartialEq)]
pub struct InpaintOutput {
    pub images: Vec<ImageBuffer>,
    pub known_region: MetricReport,
    pub stroke_rmse: Option<MetricReport>,
}

/// Space-to-depth codec matching a backbone's latent channel count.
pub fn codec_for(config: &BackboneConfig) -> Result<SpaceToDepth> {
    let f = ((config.in_channels / 3) as f64).sqrt().round() as usize;
    if f == 0 || 3 * f * f != config.in_channels {
        return Err(Error::invalid(format!(
            "{} latent channels do not correspond to an RGB space-to-depth factor",
            config.in_channels
        )));
    }
    SpaceToDepth::new(f)
}

impl PipelineConfig {
    pub fn codec(&self) -> Result<SpaceToDepth> {
        SpaceToDepth::new(self.codec_factor)
    }

    pub fn backbone_config(&self) -> Result<BackboneConfig> {
        Ok(BackboneConfig::preset(self.preset, self.codec()?.latent_channels()))
    }

    pub fn base_params(&self) -> Result<ParameterSet> {
        ParameterSet::init(self.backbone_config()?, self.init_seed)
    }

    pub fn embedder(&self) -> ToyJointEmbedder {
        ToyJointEmbedder::new(self.embedder_seed, 64, self.codec_factor).expect("positive sizes")
    }

    /// Checks sizes and the hole, encodes everything and resolves the
    /// exemplar's subject token.
    pub fn prepare(&self, image: &ImageBuffer, mask: &RegionMask, exemplar: Option<&ImageBuffer>) -> Result<PreparedInputs> {
        let codec = self.codec()?;
        let f = codec.factor();
        let image = image.to_rgb();
        if mask.height() != image.height() || mask.width() != image.width() {
            return Err(Error::validation(
                "mask",
                format!(
                    "mask is {}x{}, image is {}x{}",
                    mask.height(),
                    mask.width(),
                    image.height(),
                    image.width()
                ),
            ));
        }
        let unit = 4 * f;
        if !image.height().is_multiple_of(unit) || !image.width().is_multiple_of(unit) {
            return Err(Error::validation(
                "image",
                format!("{}x{} is not a multiple of {unit}", image.height(), image.width()),
            ));
        }
        if mask.all_known() {
            return Err(Error::validation("mask", "empty hole: no pixel is marked unknown"));
        }
        let x_in = codec.encode(&image.masked(mask)?)?;
        let latent_mask = downsample_mask(mask, f)?;
        let exemplar = match exemplar {
            None => None,
            Some(ex) => {
                let ex = ex.to_rgb();
                if ex.height() % f != 0 || ex.width() % f != 0 {
                    return Err(Error::validation(
                        "exemplar",
                        format!("{}x{} is not a multiple of {f}", ex.height(), ex.width()),
                    ));
                }
                let embedder = self.embedder();
                let table = TokenTable::for_vocabulary(&embedder)?;
                let subject_token = auto_subject_token(&ex, &embedder, &table)?;
                Some(Exemplar {
                    latent: codec.encode(&ex)?,
                    image: ex,
                    subject_token,
                })
            }
        };
        Ok(PreparedInputs {
            image,
            mask: mask.clone(),
            x_in,
            latent_mask,
            exemplar,
        })
    }

    /// Finetunes fresh base parameters on `inputs`.
    pub fn finetune(
        &self,
        inputs: &PreparedInputs,
        cfg: &FinetuneConfig,
        on_iter: Option<&mut dyn FnMut(&LossRecord)>,
    ) -> Result<(ParameterSet, Vec<LossRecord>)> {
        let mut params = self.base_params()?;
        let bundle = match &inputs.exemplar {
            Some(ex) => {
                let bbox = inputs
                    .latent_mask
                    .hole_bbox()
                    .ok_or_else(|| Error::validation("mask", "empty hole: no latent cell is unknown"))?;
                Some(ExemplarBundle::new(
                    ex.latent.clone(),
                    ex.subject_token,
                    bbox,
                    inputs.x_in.shape(),
                )?)
            }
            None => None,
        };
        let history = run_finetune(
            &mut params,
            &inputs.x_in,
            &inputs.latent_mask,
            bundle.as_ref(),
            cfg,
            &NoiseSchedule::default(),
            on_iter,
        )?;
        Ok((params, history))
    }
}

/// Encodes an RGBA stroke layer for the codec implied by `params`.
pub fn stroke_for(params: &ParameterSet, rgba: &ImageBuffer) -> Result<StrokeMap> {
    if rgba.channels() != 4 {
        return Err(Error::validation("stroke", "stroke layer must be RGBA"));
    }
    StrokeMap::from_rgba(rgba, &codec_for(params.config())?)
}

/// Validates `spec` against the session and runs the sampler.
pub fn run_inpaint(
    params: Arc<ParameterSet>,
    inputs: &PreparedInputs,
    spec: &GuidanceSpec,
    sampler: &SamplerConfig,
    observer: Option<&dyn SampleObserver>,
) -> Result<InpaintOutput> {
    let codec = codec_for(params.config())?;
    let [c, _, _] = inputs.x_in.shape();
    if codec.latent_channels() != c {
        return Err(Error::invalid(format!(
            "checkpoint expects {} latent channels, inputs have {c}",
            codec.latent_channels()
        )));
    }
    let valid = validate_spec(spec, &inputs.mask)?;
    let model = DiffusionModel::new(params)?;
    let sched = NoiseSchedule::default();
    let images = inpaint(&model, &codec, &inputs.image, &inputs.mask, &valid, sampler, &sched, observer)?;
    let known = images
        .iter()
        .map(|img| known_region_error(img, &inputs.image, &inputs.mask))
        .collect::<Result<Vec<_>>>()?;
    let stroke = match &valid.stroke {
        Some(s) => Some(MetricReport::new(
            "stroke_rmse",
            "stroke_alpha",
            images.iter().map(|img| stroke_rmse(img, &s.rgba)).collect::<Result<Vec<_>>>()?,
        )?),
        None => None,
    };
    Ok(InpaintOutput {
        images,
        known_region: MetricReport::new("known_region_error", "input_mask", known)?,
        stroke_rmse: stroke,
    })
}
