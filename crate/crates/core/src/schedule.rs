//! Noise schedule, forward noising, deterministic DDIM stepping and
//! classifier-free guidance.

use serde::{Deserialize, Serialize};

use crate::codec::LatentMap;
use crate::error::{Error, Result};

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// Cumulative signal-retention coefficients `alpha_bar[0..=T]`.
///
/// Index 0 is clean data (`alpha_bar[0] == 1`), the sequence is strictly
/// decreasing after that.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::invalid("schedule needs at least one timestep"));
        }
        if !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::invalid(format!(
                "betas must satisfy 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for i in 0..steps {
            let beta = if steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
            };
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Ok(Self { alpha_bar })
    }

    /// Builds a schedule directly from `alpha_bar` values; used by tests and
    /// by adapters that ship their own tables.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 || alpha_bar[0] != 1.0 {
            return Err(Error::invalid("alpha_bar must start at 1 and have length >= 2"));
        }
        if alpha_bar.windows(2).any(|w| w[1].partial_cmp(&w[0]) != Some(std::cmp::Ordering::Less) || w[1] <= 0.0) {
            return Err(Error::invalid("alpha_bar must be strictly decreasing within (0, 1]"));
        }
        Ok(Self { alpha_bar })
    }

    /// Total number of diffusion timesteps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::invalid(format!("timestep {t} outside [0, {}]", self.steps())))
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Uniformly strided descending timesteps for a `k`-step sampler, paired
    /// with the timestep each step lands on. The last step lands on 0.
    pub fn strided_pairs(&self, k: usize) -> Result<Vec<(usize, usize)>> {
        let grid = self.strided_grid(k)?;
        Ok(grid.windows(2).rev().map(|w| (w[1], w[0])).collect())
    }

    /// Ascending grid `0 = g_0 < g_1 < ... < g_k = T` visited by a `k`-step
    /// sampler.
    pub fn strided_grid(&self, k: usize) -> Result<Vec<usize>> {
        let total = self.steps();
        if k < 1 || k > total {
            return Err(Error::invalid(format!(
                "sampler steps must be in [1, {total}], got {k}"
            )));
        }
        Ok((0..=k).map(|i| (i * total + k / 2) / k).collect())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_TRAIN_STEPS, ScheduleKind::Linear)
            .expect("default schedule parameters are valid")
    }
}

pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    match kind {
        ScheduleKind::Linear => NoiseSchedule::linear(steps, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX),
    }
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn add_noise(x0: &LatentMap, t: usize, eps: &LatentMap, sched: &NoiseSchedule) -> Result<LatentMap> {
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Deterministic (eta = 0) DDIM update from `t` to `t_prev`.
pub fn ddim_step(
    x_t: &LatentMap,
    eps_pred: &LatentMap,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<LatentMap> {
    if t_prev >= t {
        return Err(Error::invalid(format!(
            "ddim step must go backwards in time, got t={t}, t_prev={t_prev}"
        )));
    }
    let ab_t = sched.alpha_bar(t)?;
    let ab_prev = sched.alpha_bar(t_prev)?;
    let (sa_t, sb_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (sa_p, sb_p) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    x_t.zip_map(eps_pred, |x, e| {
        let x0 = (x - sb_t * e) / sa_t;
        sa_p * x0 + sb_p * e
    })
}

/// Same update as [`ddim_step`] but taking `alpha_bar` values directly.
pub fn ddim_update(x: f64, eps: f64, ab_t: f64, ab_prev: f64) -> f64 {
    let x0 = (x - (1.0 - ab_t).sqrt() * eps) / ab_t.sqrt();
    ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * eps
}

/// Classifier-free guidance: `eps_u + s (eps_c - eps_u)`, evaluated as
/// `eps_c + (s - 1) (eps_c - eps_u)` so that `s = 1` returns `eps_c` and
/// equal branches return themselves without rounding.
pub fn cfg_combine(eps_uncond: &LatentMap, eps_cond: &LatentMap, scale: f64) -> Result<LatentMap> {
    eps_uncond.zip_map(eps_cond, |u, c| c + (scale - 1.0) * (c - u))
}
