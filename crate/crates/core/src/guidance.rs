//! Guidance specs, condition composition and automatic subject-token
//! retrieval by joint text/image embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::text::{self, TokenSequence, BOS, EOS, MAX_TOKENS, VOCAB_SIZE};
use crate::codec::{downsample_mask, ImageBuffer, LatentCodec, LatentMap, RegionMask};
use crate::error::{Error, Result};
use crate::par;

pub const DEFAULT_SCALE: f64 = 8.0;
/// Stroke injection point, as a fraction of `T`, used when none is given.
pub const DEFAULT_TAU: f64 = 0.55;

/// Text-side and image-side encoders into a shared embedding space.
pub trait JointEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_token(&self, id: u32) -> Vec<f64>;
    fn embed_image(&self, image: &ImageBuffer) -> Result<Vec<f64>>;
}

/// Precomputed text-side embeddings for a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTable {
    ids: Vec<u32>,
    dim: usize,
    rows: Vec<f64>,
}

impl TokenTable {
    pub fn new(ids: Vec<u32>, dim: usize, rows: Vec<f64>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::invalid("vocabulary must not be empty"));
        }
        if rows.len() != ids.len() * dim {
            return Err(Error::shape(&[ids.len(), dim], &[rows.len()]));
        }
        Ok(Self { ids, dim, rows })
    }

    pub fn precompute(embedder: &dyn JointEmbedder, ids: Vec<u32>) -> Result<Self> {
        let dim = embedder.dim();
        let rows = par::map_range(ids.len(), |i| embedder.embed_token(ids[i]));
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::shape(&[dim], &[r.len()]));
        }
        Self::new(ids, dim, rows.concat())
    }

    /// Table over every non-sentinel id of the backbone vocabulary.
    pub fn for_vocabulary(embedder: &dyn JointEmbedder) -> Result<Self> {
        Self::precompute(embedder, (EOS + 1..VOCAB_SIZE).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Token whose embedding has the largest dot product with `query`; ties
    /// go to the lowest id.
    pub fn argmax(&self, query: &[f64]) -> Result<u32> {
        if query.len() != self.dim {
            return Err(Error::shape(&[self.dim], &[query.len()]));
        }
        const CHUNK: usize = 256;
        let chunks = self.ids.len().div_ceil(CHUNK);
        let best = par::map_range(chunks, |c| {
            let mut best: Option<(f64, u32)> = None;
            for i in c * CHUNK..((c + 1) * CHUNK).min(self.ids.len()) {
                let score: f64 = self.row(i).iter().zip(query).map(|(a, b)| a * b).sum();
                best = Some(pick(best, (score, self.ids[i])));
            }
            best
        });
        best.into_iter()
            .flatten()
            .reduce(|a, b| pick(Some(a), b))
            .map(|(_, id)| id)
            .ok_or_else(|| Error::invalid("vocabulary must not be empty"))
    }
}

fn pick(cur: Option<(f64, u32)>, cand: (f64, u32)) -> (f64, u32) {
    match cur {
        None => cand,
        Some(c) if cand.0 > c.0 || (cand.0 == c.0 && cand.1 < c.1) => cand,
        Some(c) => c,
    }
}

/// Subject token for an exemplar image.
pub fn auto_subject_token(exemplar: &ImageBuffer, embedder: &dyn JointEmbedder, table: &TokenTable) -> Result<u32> {
    if embedder.dim() != table.dim() {
        return Err(Error::shape(&[table.dim()], &[embedder.dim()]));
    }
    let query = embedder.embed_image(exemplar)?;
    table.argmax(&query)
}

/// Deterministic stand-in for a CLIP-style model: token embeddings are
/// unit-normalised columns of a seeded Gaussian matrix, image embeddings are the mean of a
/// seeded projection of non-overlapping `patch x patch` RGB patches.
#[derive(Debug, Clone)]
pub struct ToyJointEmbedder {
    seed: u64,
    dim: usize,
    patch: usize,
    projection: Vec<f64>,
}

impl ToyJointEmbedder {
    pub fn new(seed: u64, dim: usize, patch: usize) -> Result<Self> {
        if dim == 0 || patch == 0 {
            return Err(Error::invalid("embedder dim and patch size must be positive"));
        }
        let fan_in = 3 * patch * patch;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a6e);
        let scale = 1.0 / (fan_in as f64).sqrt();
        let projection = (0..dim * fan_in)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Ok(Self {
            seed,
            dim,
            patch,
            projection,
        })
    }
}

impl Default for ToyJointEmbedder {
    fn default() -> Self {
        Self::new(0, 64, 8).expect("valid defaults")
    }
}

impl JointEmbedder for ToyJointEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_token(&self, id: u32) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::from(id) + 1);
        let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        v.into_iter().map(|x| x / norm).collect()
    }

    fn embed_image(&self, image: &ImageBuffer) -> Result<Vec<f64>> {
        let p = self.patch;
        let (ph, pw) = (image.height() / p, image.width() / p);
        if ph == 0 || pw == 0 {
            return Err(Error::invalid(format!(
                "image {}x{} smaller than one {p}x{p} patch",
                image.height(),
                image.width()
            )));
        }
        let fan_in = 3 * p * p;
        let mut acc = vec![0.0; self.dim];
        let mut patch = vec![0.0; fan_in];
        for py in 0..ph {
            for px in 0..pw {
                for dy in 0..p {
                    for dx in 0..p {
                        for c in 0..3 {
                            patch[(dy * p + dx) * 3 + c] =
                                f64::from(image.get(py * p + dy, px * p + dx, c.min(image.channels() - 1)));
                        }
                    }
                }
                for (o, row) in acc.iter_mut().zip(self.projection.chunks(fan_in)) {
                    *o += row.iter().zip(&patch).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        let n = (ph * pw) as f64;
        Ok(acc.into_iter().map(|v| v / n).collect())
    }
}

/// Where the subject token goes relative to the prompt words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubjectPlacement {
    #[default]
    AfterPrompt,
    BeforePrompt,
}

/// `[BOS, words(prompt), subject, EOS]` with absent parts omitted; both
/// absent gives the null sequence.
pub fn compose_condition(prompt: Option<&str>, subject: Option<u32>) -> Result<TokenSequence> {
    compose_condition_with(prompt, subject, SubjectPlacement::AfterPrompt)
}

pub fn compose_condition_with(
    prompt: Option<&str>,
    subject: Option<u32>,
    placement: SubjectPlacement,
) -> Result<TokenSequence> {
    let mut words = prompt.map(text::words).unwrap_or_default();
    let room = MAX_TOKENS - 2 - usize::from(subject.is_some());
    words.truncate(room);
    let body = match (subject, placement) {
        (None, _) => words,
        (Some(v), SubjectPlacement::AfterPrompt) => {
            words.push(v);
            words
        }
        (Some(v), SubjectPlacement::BeforePrompt) => std::iter::once(v).chain(words).collect(),
    };
    if body.is_empty() {
        return Ok(TokenSequence::null());
    }
    let seq = TokenSequence::framed(&body)?;
    debug_assert_eq!(seq.ids()[0], BOS);
    Ok(seq)
}

/// User-painted colour hint: the RGBA layer plus its latent encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct StrokeMap {
    /// RGBA layer at image resolution.
    pub rgba: ImageBuffer,
    /// Pixels with alpha > 0.
    pub pixel_mask: RegionMask,
    /// Encoded stroke colours.
    pub latent: LatentMap,
    /// Latent cells fully covered by stroke pixels.
    pub mask: RegionMask,
}

impl StrokeMap {
    pub fn from_rgba(rgba: &ImageBuffer, codec: &dyn LatentCodec) -> Result<Self> {
        let pixel_mask = rgba.alpha_mask()?;
        let latent = codec.encode(&rgba.to_rgb())?;
        let mask = downsample_mask(&pixel_mask, codec.factor())?;
        Ok(Self {
            rgba: rgba.clone(),
            pixel_mask,
            latent,
            mask,
        })
    }
}

/// Conditioning bundle for one inpainting request.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceSpec {
    pub prompt: Option<String>,
    pub subject_token: Option<u32>,
    pub stroke: Option<StrokeMap>,
    /// Stroke injection point as a fraction of `T`.
    pub tau: Option<f64>,
    pub scale: Option<f64>,
    pub seed: u64,
    pub num_outputs: usize,
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        Self {
            prompt: None,
            subject_token: None,
            stroke: None,
            tau: None,
            scale: None,
            seed: 0,
            num_outputs: 1,
        }
    }
}

impl GuidanceSpec {
    pub fn unconditional(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }
}

/// The four guidance families a spec can express.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    Unconditional,
    /// Text and/or exemplar token.
    Semantic,
    Stroke,
    /// Stroke plus text and/or exemplar token.
    Mixed,
}

/// A spec with defaults filled and constraints checked.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedSpec {
    pub condition: TokenSequence,
    pub stroke: Option<StrokeMap>,
    pub tau: Option<f64>,
    pub scale: f64,
    pub seed: u64,
    pub num_outputs: usize,
}

impl ValidatedSpec {
    pub fn mode(&self) -> GuidanceMode {
        match (self.condition.is_null(), self.stroke.is_some()) {
            (true, false) => GuidanceMode::Unconditional,
            (false, false) => GuidanceMode::Semantic,
            (true, true) => GuidanceMode::Stroke,
            (false, true) => GuidanceMode::Mixed,
        }
    }
}

/// Normalises `spec` against the session's pixel mask.
pub fn validate_spec(spec: &GuidanceSpec, pixel_mask: &RegionMask) -> Result<ValidatedSpec> {
    if spec.tau.is_some() && spec.stroke.is_none() {
        return Err(Error::validation("tau", "tau is only meaningful together with a stroke"));
    }
    if let Some(tau) = spec.tau {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::validation("tau", format!("{tau} outside [0, 1]")));
        }
    }
    let scale = spec.scale.unwrap_or(DEFAULT_SCALE);
    if !scale.is_finite() || scale < 0.0 {
        return Err(Error::validation("scale", format!("{scale} must be finite and >= 0")));
    }
    if spec.num_outputs < 1 {
        return Err(Error::validation("num_outputs", "at least one output is required"));
    }
    if let Some(v) = spec.subject_token {
        if v >= VOCAB_SIZE || v == BOS || v == EOS {
            return Err(Error::validation("subject_token", format!("{v} is not a usable vocabulary id")));
        }
    }
    if let Some(stroke) = &spec.stroke {
        let pm = &stroke.pixel_mask;
        if pm.height() != pixel_mask.height() || pm.width() != pixel_mask.width() {
            return Err(Error::validation(
                "stroke",
                format!(
                    "stroke is {}x{}, image is {}x{}",
                    pm.height(),
                    pm.width(),
                    pixel_mask.height(),
                    pixel_mask.width()
                ),
            ));
        }
        if pm.none_known() {
            return Err(Error::validation("stroke", "stroke layer has no painted pixels"));
        }
        if !pm.is_subset_of(&pixel_mask.inverted()) {
            return Err(Error::validation("stroke", "stroke overlaps the known region"));
        }
    }
    let condition = compose_condition(spec.prompt.as_deref(), spec.subject_token)?;
    Ok(ValidatedSpec {
        condition,
        tau: spec.stroke.as_ref().map(|_| spec.tau.unwrap_or(DEFAULT_TAU)),
        stroke: spec.stroke.clone(),
        scale,
        seed: spec.seed,
        num_outputs: spec.num_outputs,
    })
}
