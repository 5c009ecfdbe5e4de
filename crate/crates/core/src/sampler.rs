//! The inpainting sampling loop: deterministic DDIM over a strided schedule
//! with known-region blending, one-shot stroke injection, the null/composed
//! conditioning switch and classifier-free guidance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMaskSet, MaskMode, SelfMaskRule};
use crate::backbone::{NoisePredictor, TextEmbedding, TokenSequence};
use crate::codec::{downsample_mask, ImageBuffer, LatentCodec, LatentMap, RegionMask};
use crate::error::{Error, Result};
use crate::guidance::{StrokeMap, ValidatedSpec};
use crate::par;
use crate::schedule::{add_noise, cfg_combine, ddim_step, NoiseSchedule};

pub const DEFAULT_NUM_STEPS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub attn_mask_enabled: bool,
    pub self_mask_rule: SelfMaskRule,
    pub mask_mode: MaskMode,
    /// Copy known input pixels over the decoded output, so masks that do not
    /// align with the codec grid still keep their known pixels.
    pub paste_back: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: DEFAULT_NUM_STEPS,
            attn_mask_enabled: true,
            self_mask_rule: SelfMaskRule::default(),
            mask_mode: MaskMode::default(),
            paste_back: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.num_steps < 1 || self.num_steps > sched.steps() {
            return Err(Error::validation(
                "num_steps",
                format!("{} outside [1, {}]", self.num_steps, sched.steps()),
            ));
        }
        Ok(())
    }
}

/// `m * add_noise(x_in, t, eps_fixed) + (1 - m) * x_t`.
pub fn blend_known(
    x_t: &LatentMap,
    x_in: &LatentMap,
    m: &RegionMask,
    t: usize,
    eps_fixed: &LatentMap,
    sched: &NoiseSchedule,
) -> Result<LatentMap> {
    x_t.check_same_shape(x_in)?;
    add_noise(x_in, t, eps_fixed, sched)?.select(x_t, m)
}

/// At `t == tau_step` replaces the stroke cells with the noised stroke
/// latent; returns `x_t` unchanged at every other timestep.
pub fn blend_stroke(
    x_t: &LatentMap,
    stroke: &StrokeMap,
    t: usize,
    tau_step: usize,
    eps: &LatentMap,
    sched: &NoiseSchedule,
) -> Result<LatentMap> {
    x_t.check_same_shape(&stroke.latent)?;
    if t != tau_step {
        return Ok(x_t.clone());
    }
    add_noise(&stroke.latent, t, eps, sched)?.select(x_t, &stroke.mask)
}

/// Largest grid timestep not exceeding `tau * T`.
pub fn tau_step(tau: f64, sched: &NoiseSchedule, num_steps: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::validation("tau", format!("{tau} outside [0, 1]")));
    }
    let target = tau * sched.steps() as f64;
    let grid = sched.strided_grid(num_steps)?;
    Ok(grid
        .into_iter()
        .rev()
        .find(|&g| g as f64 <= target + 1e-9)
        .unwrap_or(0))
}

/// Number of DDIM steps that start at or below the stroke injection point.
pub fn post_injection_steps(tau: f64, sched: &NoiseSchedule, num_steps: usize) -> Result<usize> {
    let ts = tau_step(tau, sched, num_steps)?;
    Ok(sched
        .strided_pairs(num_steps)?
        .iter()
        .filter(|(t, _)| *t <= ts)
        .count())
}

/// Initial latent and the fixed known-region noise for one output, drawn
/// from the `(seed, index)` stream.
pub fn output_noise(seed: u64, index: usize, shape: [usize; 3]) -> (LatentMap, LatentMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let [c, h, w] = shape;
    let mut draw = || {
        let data = (0..c * h * w).map(|_| StandardNormal.sample(&mut rng)).collect();
        LatentMap::new(c, h, w, data).expect("length matches shape")
    };
    let x_t = draw();
    let eps = draw();
    (x_t, eps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Null,
    Composed,
}

/// Progress record emitted after each completed step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepEvent {
    pub output: usize,
    pub step: usize,
    pub total_steps: usize,
    pub t: usize,
    pub t_prev: usize,
    pub condition: Condition,
    pub cfg: bool,
    pub stroke_blended: bool,
}

/// Receives every step event together with the latent the step produced.
pub trait SampleObserver: Sync {
    fn on_step(&self, event: &StepEvent, latent: &LatentMap);
}

impl<F: Fn(&StepEvent, &LatentMap) + Sync> SampleObserver for F {
    fn on_step(&self, event: &StepEvent, latent: &LatentMap) {
        self(event, latent)
    }
}

struct Branch {
    text: TextEmbedding,
    masks: Option<AttentionMaskSet>,
}

impl Branch {
    fn new(
        model: &dyn NoisePredictor,
        tokens: &TokenSequence,
        latent_mask: &RegionMask,
        cfg: &SamplerConfig,
    ) -> Result<Self> {
        let text = model.encode_text(tokens)?;
        let masks = if cfg.attn_mask_enabled {
            let sides = model.attention_sides(latent_mask.height(), latent_mask.width());
            Some(
                AttentionMaskSet::build(latent_mask, &sides, text.len(), cfg.self_mask_rule)?
                    .with_mode(cfg.mask_mode),
            )
        } else {
            None
        };
        Ok(Self { text, masks })
    }

    fn predict(&self, model: &dyn NoisePredictor, x: &LatentMap, t: usize) -> Result<LatentMap> {
        model.predict_noise(x, &self.text, t, self.masks.as_ref())
    }
}

/// Runs the sampling loop for every requested output and returns the final
/// latents. `latent_mask` marks known latent cells.
pub fn sample_latents(
    model: &dyn NoisePredictor,
    x_in: &LatentMap,
    latent_mask: &RegionMask,
    spec: &ValidatedSpec,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    observer: Option<&dyn SampleObserver>,
) -> Result<Vec<LatentMap>> {
    cfg.validate(sched)?;
    if latent_mask.height() != x_in.height() || latent_mask.width() != x_in.width() {
        return Err(Error::shape(
            &[x_in.height(), x_in.width()],
            &[latent_mask.height(), latent_mask.width()],
        ));
    }
    if let Some(stroke) = &spec.stroke {
        x_in.check_same_shape(&stroke.latent)?;
    }
    let pairs = sched.strided_pairs(cfg.num_steps)?;
    let ts = match (&spec.stroke, spec.tau) {
        (Some(_), Some(tau)) => Some(tau_step(tau, sched, cfg.num_steps)?),
        (Some(_), None) => return Err(Error::invalid("stroke guidance requires tau")),
        _ => None,
    };
    let null = Branch::new(model, &TokenSequence::null(), latent_mask, cfg)?;
    let composed = if spec.condition.is_null() {
        None
    } else {
        Some(Branch::new(model, &spec.condition, latent_mask, cfg)?)
    };
    let total_steps = pairs.len();

    par::try_map_range(spec.num_outputs, |output| {
        let (mut x, eps_fixed) = output_noise(spec.seed, output, x_in.shape());
        if let (Some(stroke), Some(ts)) = (&spec.stroke, ts) {
            if ts == sched.steps() {
                x = blend_stroke(&x, stroke, ts, ts, &eps_fixed, sched)?;
            }
        }
        for (step, &(t, t_prev)) in pairs.iter().enumerate() {
            let active = composed.as_ref().filter(|_| ts.is_none_or(|ts| t <= ts));
            let eps = match active {
                Some(c) => {
                    let eu = null.predict(model, &x, t)?;
                    let ec = c.predict(model, &x, t)?;
                    cfg_combine(&eu, &ec, spec.scale)?
                }
                None => null.predict(model, &x, t)?,
            };
            x = ddim_step(&x, &eps, t, t_prev, sched)?;
            let stroke_blended = ts == Some(t_prev);
            if let (Some(stroke), true) = (&spec.stroke, stroke_blended) {
                x = blend_stroke(&x, stroke, t_prev, t_prev, &eps_fixed, sched)?;
            }
            x = blend_known(&x, x_in, latent_mask, t_prev, &eps_fixed, sched)?;
            if !x.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("latent of output {output} after step t={t} -> {t_prev}"),
                    at: step,
                });
            }
            if let Some(obs) = observer {
                let event = StepEvent {
                    output,
                    step,
                    total_steps,
                    t,
                    t_prev,
                    condition: if active.is_some() { Condition::Composed } else { Condition::Null },
                    cfg: active.is_some(),
                    stroke_blended,
                };
                obs.on_step(&event, &x);
            }
        }
        Ok(x)
    })
}

/// Full pipeline: encode, sample, decode. `pixel_mask` marks known pixels.
#[allow(clippy::too_many_arguments)]
pub fn inpaint(
    model: &dyn NoisePredictor,
    codec: &dyn LatentCodec,
    image: &ImageBuffer,
    pixel_mask: &RegionMask,
    spec: &ValidatedSpec,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    observer: Option<&dyn SampleObserver>,
) -> Result<Vec<ImageBuffer>> {
    let image = image.to_rgb();
    let x_in = codec.encode(&image.masked(pixel_mask)?)?;
    let latent_mask = downsample_mask(pixel_mask, codec.factor())?;
    let latents = sample_latents(model, &x_in, &latent_mask, spec, cfg, sched, observer)?;
    latents
        .iter()
        .map(|z| {
            let out = codec.decode(z)?;
            if cfg.paste_back {
                out.composite_known(&image, pixel_mask)
            } else {
                Ok(out)
            }
        })
        .collect()
}
