//! Lossless image <-> latent conversion and mask resolution transfer.
//!
//! The latent encoder is a space-to-depth rearrangement preceded by the affine
//! map `v -> 2v - 1`. Pixel values are stored as `f32` and latents as `f64`,
//! so the affine map and its inverse are exact for every pixel value that an
//! 8-bit raster can produce (and for any `f32` in `[2^-29, 1]`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default spatial downscaling factor between image and latent.
pub const DEFAULT_FACTOR: usize = 8;

/// Interleaved (HWC) raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid("image dimensions must be non-zero"));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(&[height, width, channels], &[data.len()]));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        debug_assert!((0.0..=1.0).contains(&v));
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Keeps the first three channels of an RGBA buffer.
    pub fn to_rgb(&self) -> ImageBuffer {
        if self.channels == 3 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.height * self.width * 3);
        for px in self.data.chunks(self.channels) {
            for c in 0..3 {
                data.push(px[c.min(self.channels - 1)]);
            }
        }
        ImageBuffer {
            height: self.height,
            width: self.width,
            channels: 3,
            data,
        }
    }

    /// Pixels whose alpha channel is strictly positive.
    pub fn alpha_mask(&self) -> Result<RegionMask> {
        if self.channels != 4 {
            return Err(Error::invalid("alpha mask requires an RGBA buffer"));
        }
        let bits = self.data.chunks(4).map(|px| px[3] > 0.0).collect();
        RegionMask::from_bits(self.height, self.width, bits)
    }

    /// `mask ⊙ self`: zeroes every pixel outside the known region.
    pub fn masked(&self, mask: &RegionMask) -> Result<ImageBuffer> {
        check_dims(mask, self.height, self.width)?;
        let mut out = self.clone();
        for (i, known) in mask.bits().iter().enumerate() {
            if !known {
                for c in 0..self.channels {
                    out.data[i * self.channels + c] = 0.0;
                }
            }
        }
        Ok(out)
    }

    /// Replaces pixels inside `mask`'s known region with `source`'s pixels.
    pub fn composite_known(&self, source: &ImageBuffer, mask: &RegionMask) -> Result<ImageBuffer> {
        check_dims(mask, self.height, self.width)?;
        if source.height != self.height
            || source.width != self.width
            || source.channels != self.channels
        {
            return Err(Error::shape(
                &[self.height, self.width, self.channels],
                &[source.height, source.width, source.channels],
            ));
        }
        let mut out = self.clone();
        let ch = self.channels;
        for (i, known) in mask.bits().iter().enumerate() {
            if *known {
                out.data[i * ch..(i + 1) * ch].copy_from_slice(&source.data[i * ch..(i + 1) * ch]);
            }
        }
        Ok(out)
    }
}

/// Channel-major (CHW) latent array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl LatentMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(&[channels, height, width], &[data.len()]));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn check_same_shape(&self, other: &LatentMap) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(&self.shape(), &other.shape()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise `self[i] = f(self[i], other[i])`.
    pub fn zip_map(&self, other: &LatentMap, f: impl Fn(f64, f64) -> f64) -> Result<LatentMap> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| f(*a, *b))
            .collect();
        Ok(LatentMap { data, ..*self })
    }

    /// Per-cell select: `known` cells from `self`, others from `other`.
    /// The mask is broadcast over channels.
    pub fn select(&self, other: &LatentMap, mask: &RegionMask) -> Result<LatentMap> {
        self.check_same_shape(other)?;
        check_dims(mask, self.height, self.width)?;
        let plane = self.height * self.width;
        let mut out = other.clone();
        for c in 0..self.channels {
            for (i, known) in mask.bits().iter().enumerate() {
                if *known {
                    out.data[c * plane + i] = self.data[c * plane + i];
                }
            }
        }
        Ok(out)
    }
}

/// Binary spatial map; `true` marks a known pixel (mask value 1).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegionMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl RegionMask {
    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(&[height, width], &[bits.len()]));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    /// Builds a mask from raw values, rejecting anything other than 0 or 1.
    pub fn from_values(height: usize, width: usize, values: &[u8]) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| **v > 1) {
            return Err(Error::invalid(format!("mask value {v} is not binary")));
        }
        Self::from_bits(height, width, values.iter().map(|v| *v == 1).collect())
    }

    pub fn filled(height: usize, width: usize, known: bool) -> Self {
        Self {
            height,
            width,
            bits: vec![known; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn is_known(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, known: bool) {
        self.bits[y * self.width + x] = known;
    }

    pub fn known_count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn all_known(&self) -> bool {
        self.bits.iter().all(|b| *b)
    }

    pub fn none_known(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// Swaps known and unknown.
    pub fn inverted(&self) -> RegionMask {
        RegionMask {
            bits: self.bits.iter().map(|b| !b).collect(),
            ..*self
        }
    }

    /// Elementwise `self <= other`.
    pub fn is_subset_of(&self, other: &RegionMask) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.bits.iter().zip(&other.bits).all(|(a, b)| !a || *b)
    }

    /// Bounding box `(y0, x0, height, width)` of the unknown cells, if any.
    pub fn hole_bbox(&self) -> Option<Rect> {
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.is_known(y, x) {
                    bbox = Some(match bbox {
                        None => (y, x, y, x),
                        Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
                    });
                }
            }
        }
        bbox.map(|(y0, x0, y1, x1)| Rect {
            y: y0,
            x: x0,
            height: y1 - y0 + 1,
            width: x1 - x0 + 1,
        })
    }
}

/// Axis-aligned rectangle in cell coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y && y < self.y + self.height && x >= self.x && x < self.x + self.width
    }
}

fn check_dims(mask: &RegionMask, height: usize, width: usize) -> Result<()> {
    if mask.height != height || mask.width != width {
        return Err(Error::shape(&[height, width], &[mask.height, mask.width]));
    }
    Ok(())
}

/// Adapter slot for image <-> latent codecs.
pub trait LatentCodec: Send + Sync {
    fn factor(&self) -> usize;
    fn latent_channels(&self) -> usize;
    fn encode(&self, image: &ImageBuffer) -> Result<LatentMap>;
    fn decode(&self, latent: &LatentMap) -> Result<ImageBuffer>;
}

/// Affine + space-to-depth codec. Latent channel `c·f² + dy·f + dx` at cell
/// `(y, x)` holds colour channel `c` of pixel `(y·f + dy, x·f + dx)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceToDepth {
    factor: usize,
}

impl Default for SpaceToDepth {
    fn default() -> Self {
        Self {
            factor: DEFAULT_FACTOR,
        }
    }
}

impl SpaceToDepth {
    pub fn new(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::invalid("codec factor must be positive"));
        }
        Ok(Self { factor })
    }
}

const COLOR_CHANNELS: usize = 3;

impl LatentCodec for SpaceToDepth {
    fn factor(&self) -> usize {
        self.factor
    }

    fn latent_channels(&self) -> usize {
        COLOR_CHANNELS * self.factor * self.factor
    }

    fn encode(&self, image: &ImageBuffer) -> Result<LatentMap> {
        let f = self.factor;
        if image.channels != COLOR_CHANNELS {
            return Err(Error::invalid(format!(
                "encode expects {COLOR_CHANNELS} channels, got {}",
                image.channels
            )));
        }
        if !image.height.is_multiple_of(f) || !image.width.is_multiple_of(f) {
            return Err(Error::invalid(format!(
                "image {}x{} not divisible by codec factor {f}",
                image.height, image.width
            )));
        }
        let (h, w) = (image.height / f, image.width / f);
        let mut latent = LatentMap::zeros(self.latent_channels(), h, w);
        for y in 0..image.height {
            for x in 0..image.width {
                let (cy, dy, cx, dx) = (y / f, y % f, x / f, x % f);
                for c in 0..COLOR_CHANNELS {
                    let v = f64::from(image.get(y, x, c));
                    latent.set(c * f * f + dy * f + dx, cy, cx, 2.0 * v - 1.0);
                }
            }
        }
        Ok(latent)
    }

    fn decode(&self, latent: &LatentMap) -> Result<ImageBuffer> {
        let f = self.factor;
        if latent.channels != self.latent_channels() {
            return Err(Error::invalid(format!(
                "latent has {} channels, codec expects {}",
                latent.channels,
                self.latent_channels()
            )));
        }
        let (height, width) = (latent.height * f, latent.width * f);
        let mut data = vec![0.0f32; height * width * COLOR_CHANNELS];
        for y in 0..height {
            for x in 0..width {
                let (cy, dy, cx, dx) = (y / f, y % f, x / f, x % f);
                for c in 0..COLOR_CHANNELS {
                    let z = latent.get(c * f * f + dy * f + dx, cy, cx);
                    let v = ((z + 1.0) / 2.0).clamp(0.0, 1.0);
                    data[(y * width + x) * COLOR_CHANNELS + c] = v as f32;
                }
            }
        }
        ImageBuffer::new(height, width, COLOR_CHANNELS, data)
    }
}

/// Reduces a mask by `factor`; a coarse cell is known only when every pixel
/// it covers is known.
pub fn downsample_mask(mask: &RegionMask, factor: usize) -> Result<RegionMask> {
    if factor == 0 || !mask.height.is_multiple_of(factor) || !mask.width.is_multiple_of(factor) {
        return Err(Error::invalid(format!(
            "mask {}x{} not divisible by factor {factor}",
            mask.height, mask.width
        )));
    }
    let (h, w) = (mask.height / factor, mask.width / factor);
    Ok(RegionMask::from_fn(h, w, |cy, cx| {
        (0..factor).all(|dy| (0..factor).all(|dx| mask.is_known(cy * factor + dy, cx * factor + dx)))
    }))
}
