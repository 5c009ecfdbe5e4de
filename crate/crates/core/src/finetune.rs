//! Masked single-image finetuning: the background loss on known cells, the
//! optional exemplar reference loss on a randomly scaled and shifted copy of
//! the exemplar, and an Adam loop over all backbone parameters.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::text::{BOS, EOS, VOCAB_SIZE};
use crate::backbone::{Backbone, ParameterSet, TextInput, TokenSequence};
use crate::codec::{LatentMap, Rect, RegionMask};
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph};
use crate::schedule::{add_noise, NoiseSchedule};
use crate::tensor::Tensor;

pub const DEFAULT_ITERS: u64 = 100;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-5;
/// Range of the random exemplar scale relative to its bbox-fitting size.
pub const EXEMPLAR_SCALE: (f64, f64) = (0.5, 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub total_iters: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub use_exemplar: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            total_iters: DEFAULT_ITERS,
            learning_rate: DEFAULT_LEARNING_RATE,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            use_exemplar: true,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::validation("learning_rate", format!("{} must be > 0", self.learning_rate)));
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::validation(field, format!("{b} outside [0, 1)")));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::validation("epsilon", "must be > 0"));
        }
        Ok(())
    }
}

/// Exemplar latent, its subject token and the latent-space box it may be
/// placed in.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarBundle {
    pub x_ref: LatentMap,
    pub subject_token: u32,
    pub hole_bbox: Rect,
}

impl ExemplarBundle {
    pub fn new(x_ref: LatentMap, subject_token: u32, hole_bbox: Rect, latent_shape: [usize; 3]) -> Result<Self> {
        if subject_token >= VOCAB_SIZE || subject_token == BOS || subject_token == EOS {
            return Err(Error::validation("subject_token", format!("{subject_token} is not a usable vocabulary id")));
        }
        if x_ref.channels() != latent_shape[0] {
            return Err(Error::shape(&[latent_shape[0]], &[x_ref.channels()]));
        }
        if hole_bbox.height == 0
            || hole_bbox.width == 0
            || hole_bbox.y + hole_bbox.height > latent_shape[1]
            || hole_bbox.x + hole_bbox.width > latent_shape[2]
        {
            return Err(Error::invalid(format!("hole bbox {hole_bbox:?} outside latent bounds")));
        }
        Ok(Self {
            x_ref,
            subject_token,
            hole_bbox,
        })
    }

    /// `[BOS, v*, EOS]`.
    pub fn condition(&self) -> TokenSequence {
        TokenSequence::framed(&[self.subject_token]).expect("validated token")
    }
}

/// Masked mean squared error and its gradient with respect to `pred`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedMse {
    pub loss: f64,
    pub grad: LatentMap,
}

/// Mean of `(eps - pred)^2` over masked cells and all channels. An empty mask
/// gives a zero loss and a zero gradient.
pub fn masked_mse(eps: &LatentMap, pred: &LatentMap, m: &RegionMask) -> Result<MaskedMse> {
    eps.check_same_shape(pred)?;
    let [c, h, w] = eps.shape();
    if m.height() != h || m.width() != w {
        return Err(Error::shape(&[h, w], &[m.height(), m.width()]));
    }
    let count = m.known_count() * c;
    let mut grad = LatentMap::zeros(c, h, w);
    if count == 0 {
        return Ok(MaskedMse { loss: 0.0, grad });
    }
    let plane = h * w;
    let mut sum = 0.0;
    let g = grad.data_mut();
    for ch in 0..c {
        for (i, &known) in m.bits().iter().enumerate() {
            if known {
                let k = ch * plane + i;
                let r = eps.data()[k] - pred.data()[k];
                sum += r * r;
                g[k] = -2.0 * r / count as f64;
            }
        }
    }
    Ok(MaskedMse {
        loss: sum / count as f64,
        grad,
    })
}

/// Unmasked noise-prediction loss, the mean of `(eps - pred)^2`.
pub fn ddpm_loss(eps: &LatentMap, pred: &LatentMap) -> Result<f64> {
    eps.check_same_shape(pred)?;
    let sum: f64 = eps.data().iter().zip(pred.data()).map(|(e, p)| (e - p) * (e - p)).sum();
    Ok(sum / eps.data().len() as f64)
}

/// Forward pass with gradient tracking; returns the loss and the parameter
/// gradients.
#[allow(clippy::too_many_arguments)]
fn loss_and_grad(
    backbone: &Backbone,
    params: &ParameterSet,
    x_t: &LatentMap,
    tokens: &TokenSequence,
    t: usize,
    eps: &LatentMap,
    m: &RegionMask,
    track: bool,
) -> Result<(f64, Option<Gradients>)> {
    let mut g = Graph::new(track);
    let out = backbone.forward(&mut g, params, x_t, TextInput::Tokens(tokens), t, None)?;
    let [c, h, w] = x_t.shape();
    let pred = LatentMap::new(c, h, w, g.value(out).data().to_vec())?;
    let mse = masked_mse(eps, &pred, m)?;
    let grads = if track {
        Some(g.backward(out, Tensor::new(vec![c, h, w], mse.grad.into_data())?)?)
    } else {
        None
    };
    Ok((mse.loss, grads))
}

/// Background loss: masked error of the null-conditioned prediction on the
/// known cells of `x_in` noised to `t`.
pub fn bg_loss(
    backbone: &Backbone,
    params: &ParameterSet,
    x_in: &LatentMap,
    m: &RegionMask,
    t: usize,
    eps: &LatentMap,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let x_t = add_noise(x_in, t, eps, sched)?;
    Ok(loss_and_grad(backbone, params, &x_t, &TokenSequence::null(), t, eps, m, false)?.0)
}

/// Places `x_ref`, nearest-resampled to `scale` times its bbox-fitting size,
/// at `(dy, dx)` inside `bbox` of an otherwise zero latent.
pub fn place_exemplar(
    x_ref: &LatentMap,
    bbox: Rect,
    scale: f64,
    offset: (usize, usize),
    latent_shape: [usize; 3],
) -> Result<(LatentMap, RegionMask)> {
    let (ph, pw) = placement_size(x_ref, bbox, scale)?;
    let (dy, dx) = offset;
    if dy + ph > bbox.height || dx + pw > bbox.width {
        return Err(Error::invalid("exemplar placement leaves the hole bbox"));
    }
    let [c, h, w] = latent_shape;
    if c != x_ref.channels() || bbox.y + bbox.height > h || bbox.x + bbox.width > w {
        return Err(Error::invalid("exemplar or bbox incompatible with latent shape"));
    }
    let (eh, ew) = (x_ref.height(), x_ref.width());
    let mut out = LatentMap::zeros(c, h, w);
    let mut valid = RegionMask::filled(h, w, false);
    for y in 0..ph {
        let sy = (((2 * y + 1) * eh) / (2 * ph)).min(eh - 1);
        for x in 0..pw {
            let sx = (((2 * x + 1) * ew) / (2 * pw)).min(ew - 1);
            let (ty, tx) = (bbox.y + dy + y, bbox.x + dx + x);
            valid.set(ty, tx, true);
            for ch in 0..c {
                out.set(ch, ty, tx, x_ref.get(ch, sy, sx));
            }
        }
    }
    Ok((out, valid))
}

fn placement_size(x_ref: &LatentMap, bbox: Rect, scale: f64) -> Result<(usize, usize)> {
    if bbox.height == 0 || bbox.width == 0 {
        return Err(Error::invalid("hole bbox is empty"));
    }
    if x_ref.height() == 0 || x_ref.width() == 0 {
        return Err(Error::invalid("exemplar is empty"));
    }
    let fit = (bbox.height as f64 / x_ref.height() as f64).min(bbox.width as f64 / x_ref.width() as f64);
    let size = |e: usize, limit: usize| ((e as f64 * fit * scale).round() as usize).clamp(1, limit);
    Ok((size(x_ref.height(), bbox.height), size(x_ref.width(), bbox.width)))
}

/// Random scale in [`EXEMPLAR_SCALE`] and uniform offset inside the bbox.
pub fn augment_exemplar(
    x_ref: &LatentMap,
    bbox: Rect,
    latent_shape: [usize; 3],
    rng: &mut impl Rng,
) -> Result<(LatentMap, RegionMask)> {
    let scale = rng.random_range(EXEMPLAR_SCALE.0..=EXEMPLAR_SCALE.1);
    let (ph, pw) = placement_size(x_ref, bbox, scale)?;
    let dy = rng.random_range(0..=bbox.height - ph);
    let dx = rng.random_range(0..=bbox.width - pw);
    place_exemplar(x_ref, bbox, scale, (dy, dx), latent_shape)
}

/// Reference loss on an augmented exemplar conditioned on `[BOS, v*, EOS]`,
/// restricted to the cells the placed exemplar covers.
pub fn ref_loss(
    backbone: &Backbone,
    params: &ParameterSet,
    bundle: &ExemplarBundle,
    t: usize,
    eps: &LatentMap,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<f64> {
    let (x_aug, valid) = augment_exemplar(&bundle.x_ref, bundle.hole_bbox, eps.shape(), rng)?;
    let x_t = add_noise(&x_aug, t, eps, sched)?;
    Ok(loss_and_grad(backbone, params, &x_t, &bundle.condition(), t, eps, &valid, false)?.0)
}

/// One iteration's telemetry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub bg: f64,
    pub reference: Option<f64>,
    pub total: f64,
    pub elapsed: Duration,
}

struct Adam {
    cfg: FinetuneConfig,
    step: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    fn new(cfg: FinetuneConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    fn update(&mut self, params: &mut ParameterSet, grads: &Gradients) {
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for (name, tensor) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let n = g.data().len();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (((p, &gi), mi), vi) in tensor.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                *p -= c.learning_rate * (*mi / bc1) / ((*vi / bc2).sqrt() + c.epsilon);
            }
        }
    }
}

fn add_grads(acc: &mut Gradients, more: Gradients) {
    for (name, g) in more {
        match acc.get_mut(&name) {
            Some(a) => a.add_assign(&g),
            None => {
                acc.insert(name, g);
            }
        }
    }
}

fn normal_latent(shape: [usize; 3], rng: &mut impl Rng) -> LatentMap {
    let [c, h, w] = shape;
    let data = (0..c * h * w).map(|_| StandardNormal.sample(rng)).collect();
    LatentMap::new(c, h, w, data).expect("length matches shape")
}

/// Finetunes `params` in place on `x_in` (known cells `m`) and, when given
/// and enabled, the exemplar bundle. `on_iter` sees every iteration's losses.
pub fn run_finetune(
    params: &mut ParameterSet,
    x_in: &LatentMap,
    m: &RegionMask,
    bundle: Option<&ExemplarBundle>,
    cfg: &FinetuneConfig,
    sched: &NoiseSchedule,
    mut on_iter: Option<&mut dyn FnMut(&LossRecord)>,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    let backbone = Backbone::new(*params.config())?;
    params.config().check_latent(x_in)?;
    if m.height() != x_in.height() || m.width() != x_in.width() {
        return Err(Error::shape(&[x_in.height(), x_in.width()], &[m.height(), m.width()]));
    }
    let bundle = bundle.filter(|_| cfg.use_exemplar);
    let shape = x_in.shape();
    let null = TokenSequence::null();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(*cfg);
    let start = Instant::now();
    let mut history = Vec::with_capacity(cfg.total_iters as usize);
    for iteration in 0..cfg.total_iters {
        let t1 = rng.random_range(1..=sched.steps());
        let eps1 = normal_latent(shape, &mut rng);
        let x1 = add_noise(x_in, t1, &eps1, sched)?;
        let (bg, grads) = loss_and_grad(&backbone, params, &x1, &null, t1, &eps1, m, true)?;
        let mut grads = grads.expect("tracked");
        let mut reference = None;
        if let Some(b) = bundle {
            let t2 = rng.random_range(1..=sched.steps());
            let eps2 = normal_latent(shape, &mut rng);
            let (x_aug, valid) = augment_exemplar(&b.x_ref, b.hole_bbox, shape, &mut rng)?;
            let x2 = add_noise(&x_aug, t2, &eps2, sched)?;
            let (l, g2) = loss_and_grad(&backbone, params, &x2, &b.condition(), t2, &eps2, &valid, true)?;
            add_grads(&mut grads, g2.expect("tracked"));
            reference = Some(l);
        }
        let total = bg + reference.unwrap_or(0.0);
        if !total.is_finite() {
            return Err(Error::NonFinite {
                what: format!("finetune loss (bg={bg}, ref={reference:?})"),
                at: iteration as usize,
            });
        }
        adam.update(params, &grads);
        if !params.is_finite() {
            return Err(Error::NonFinite {
                what: "parameters after update".into(),
                at: iteration as usize,
            });
        }
        params.finetune_iters += 1;
        let record = LossRecord {
            iteration,
            bg,
            reference,
            total,
            elapsed: start.elapsed(),
        };
        if let Some(cb) = on_iter.as_deref_mut() {
            cb(&record);
        }
        history.push(record);
    }
    Ok(history)
}

/// Trailing moving average with the given window.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let s = &values[lo..=i];
            s.iter().sum::<f64>() / s.len() as f64
        })
        .collect()
}

#[cfg(test)]
mod tests;
