//! Pixel-level evaluation: stroke colour RMSE, known-region fidelity and
//! embedding similarity.

use serde::{Deserialize, Serialize};

use crate::codec::{ImageBuffer, RegionMask};
use crate::error::{Error, Result};
use crate::guidance::JointEmbedder;

fn check_dims(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::shape(&[a.height(), a.width()], &[b.height(), b.width()]));
    }
    Ok(())
}

fn check_mask(img: &ImageBuffer, m: &RegionMask) -> Result<()> {
    if img.height() != m.height() || img.width() != m.width() {
        return Err(Error::shape(&[img.height(), img.width()], &[m.height(), m.width()]));
    }
    Ok(())
}

/// RMSE in [0, 1] colour units between the output RGB and the stroke RGB over
/// pixels whose stroke alpha is non-zero, pooled over channels.
pub fn stroke_rmse(output: &ImageBuffer, stroke_rgba: &ImageBuffer) -> Result<f64> {
    let mask = stroke_rgba.alpha_mask()?;
    stroke_rmse_masked(output, stroke_rgba, &mask)
}

/// As [`stroke_rmse`] with an explicit mask (`true` = stroke pixel).
pub fn stroke_rmse_masked(output: &ImageBuffer, stroke: &ImageBuffer, mask: &RegionMask) -> Result<f64> {
    check_dims(output, stroke)?;
    check_mask(output, mask)?;
    if output.channels() < 3 || stroke.channels() < 3 {
        return Err(Error::invalid("stroke RMSE needs RGB channels"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..output.height() {
        for x in 0..output.width() {
            if !mask.is_known(y, x) {
                continue;
            }
            for c in 0..3 {
                let d = f64::from(output.get(y, x, c)) - f64::from(stroke.get(y, x, c));
                sum += d * d;
            }
            count += 3;
        }
    }
    if count == 0 {
        return Err(Error::invalid("stroke mask is empty"));
    }
    Ok((sum / count as f64).sqrt())
}

/// Largest absolute pixel difference over the known region; 0 when nothing
/// is known.
pub fn known_region_error(output: &ImageBuffer, input: &ImageBuffer, m: &RegionMask) -> Result<f64> {
    check_dims(output, input)?;
    check_mask(output, m)?;
    let channels = output.channels().min(input.channels());
    let mut worst = 0.0f64;
    for y in 0..output.height() {
        for x in 0..output.width() {
            if m.is_known(y, x) {
                for c in 0..channels {
                    let d = (f64::from(output.get(y, x, c)) - f64::from(input.get(y, x, c))).abs();
                    worst = worst.max(d);
                }
            }
        }
    }
    Ok(worst)
}

/// Cosine similarity of two vectors scaled to [-100, 100].
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(&[a.len()], &[b.len()]));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("zero-norm embedding"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(100.0 * dot / (na * nb))
}

/// Something the scorer can embed: an image or a token.
#[derive(Debug, Clone, Copy)]
pub enum ScoreInput<'a> {
    Image(&'a ImageBuffer),
    Token(u32),
}

/// Image/image or image/text alignment under `scorer`.
pub fn embed_similarity(a: ScoreInput<'_>, b: ScoreInput<'_>, scorer: &dyn JointEmbedder) -> Result<f64> {
    let embed = |x: ScoreInput<'_>| match x {
        ScoreInput::Image(img) => scorer.embed_image(img),
        ScoreInput::Token(id) => Ok(scorer.embed_token(id)),
    };
    cosine_score(&embed(a)?, &embed(b)?)
}

/// One metric evaluated over several outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    /// Where the evaluation mask came from, e.g. `stroke_alpha`.
    pub mask_source: String,
    pub samples: Vec<f64>,
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub stddev: f64,
}

impl MetricReport {
    pub fn new(metric: impl Into<String>, mask_source: impl Into<String>, samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("metric report needs at least one sample"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "metric sample".into(),
                at: i,
            });
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            metric: metric.into(),
            mask_source: mask_source.into(),
            count: samples.len(),
            samples,
            mean,
            stddev: var.sqrt(),
        })
    }

    /// One `metric=... sample=... value=...` record per line.
    pub fn to_lines(&self) -> String {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, v)| format!("metric={} sample={i} value={v:.9}\n", self.metric))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serialisable")
    }
}
