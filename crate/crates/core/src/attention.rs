//! Masked attention and the cross-/self-attention mask constructions that keep
//! text and inpainted content from influencing known pixels.
//!
//! The default mode multiplies the softmax probabilities by the binary mask
//! *after* normalisation and does not renormalise: masked rows simply lose
//! probability mass.

use serde::{Deserialize, Serialize};

use crate::codec::{downsample_mask, RegionMask};
use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

/// Binary `rows x cols` matrix; `true` lets the query row see the key column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    pub fn from_bits(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::shape(&[rows, cols], &[bits.len()]));
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    fn weight(&self, r: usize, c: usize) -> f64 {
        if self.get(r, c) {
            1.0
        } else {
            0.0
        }
    }
}

/// Where the binary mask enters the attention computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// `(softmax(QKᵀ/√d) ⊙ M) V`, no renormalisation.
    #[default]
    PostSoftmax,
    /// Masked logits set to -∞ before the softmax; a fully masked row yields
    /// a zero output row. Experimental.
    PreSoftmaxAdditive,
}

/// Which (query, key) pairs the self-attention mask blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfMaskRule {
    /// Known queries may not read unknown keys.
    #[default]
    KnownQueryUnknownKey,
    /// Unknown queries may not read known keys.
    UnknownQueryKnownKey,
}

/// Attention output together with the (unmasked) probabilities the backward
/// pass needs.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Tensor,
    pub probs: Vec<f64>,
}

fn check_dims(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&AttentionMask>) -> Result<(usize, usize, usize, usize)> {
    let (n, d) = q.dims2()?;
    let (m, dk) = k.dims2()?;
    let (mv, dv) = v.dims2()?;
    if dk != d {
        return Err(Error::shape(&[m, d], k.shape()));
    }
    if mv != m {
        return Err(Error::shape(&[m, dv], v.shape()));
    }
    if let Some(mask) = mask {
        if mask.rows != n || mask.cols != m {
            return Err(Error::shape(&[n, m], &[mask.rows, mask.cols]));
        }
    }
    Ok((n, m, d, dv))
}

/// Scaled dot-product attention with an optional binary mask.
pub fn attend(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&AttentionMask>,
    mode: MaskMode,
) -> Result<AttentionOutput> {
    let (n, m, d, dv) = check_dims(q, k, v, mask)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut probs = matmul_nt(q.data(), k.data(), n, d, m);
    for (i, row) in probs.chunks_mut(m).enumerate() {
        for x in row.iter_mut() {
            *x *= scale;
        }
        match (mode, mask) {
            (MaskMode::PreSoftmaxAdditive, Some(mask)) => {
                let mut max = f64::NEG_INFINITY;
                for (j, x) in row.iter().enumerate() {
                    if mask.get(i, j) {
                        max = max.max(*x);
                    }
                }
                if max == f64::NEG_INFINITY {
                    row.fill(0.0);
                    continue;
                }
                let mut sum = 0.0;
                for (j, x) in row.iter_mut().enumerate() {
                    *x = if mask.get(i, j) { (*x - max).exp() } else { 0.0 };
                    sum += *x;
                }
                row.iter_mut().for_each(|x| *x /= sum);
            }
            _ => softmax_in_place(row),
        }
    }
    let weights = match (mode, mask) {
        (MaskMode::PostSoftmax, Some(mask)) => {
            let mut w = probs.clone();
            for (i, row) in w.chunks_mut(m).enumerate() {
                for (j, x) in row.iter_mut().enumerate() {
                    *x *= mask.weight(i, j);
                }
            }
            w
        }
        _ => probs.clone(),
    };
    let output = Tensor::new(vec![n, dv], matmul(&weights, v.data(), n, m, dv))?;
    Ok(AttentionOutput { output, probs })
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// `[softmax(QKᵀ/√d) ⊙ M] V`.
pub fn masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
    Ok(attend(q, k, v, Some(mask), MaskMode::PostSoftmax)?.output)
}

/// Standard unmasked attention.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    Ok(attend(q, k, v, None, MaskMode::PostSoftmax)?.output)
}

/// Gradients of [`attend`] with respect to `(q, k, v)`.
pub fn attend_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &[f64],
    mask: Option<&AttentionMask>,
    mode: MaskMode,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, m, d, dv) = check_dims(q, k, v, mask)?;
    let scale = 1.0 / (d as f64).sqrt();
    let post = matches!(mode, MaskMode::PostSoftmax);
    let mut weights = probs.to_vec();
    if let (true, Some(mask)) = (post, mask) {
        for (i, row) in weights.chunks_mut(m).enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x *= mask.weight(i, j);
            }
        }
    }
    let gv = matmul_tn(&weights, grad_out.data(), n, m, dv);
    let mut dp = matmul_nt(grad_out.data(), v.data(), n, dv, m);
    if let (true, Some(mask)) = (post, mask) {
        for (i, row) in dp.chunks_mut(m).enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x *= mask.weight(i, j);
            }
        }
    }
    let mut ds = vec![0.0; n * m];
    for i in 0..n {
        let p = &probs[i * m..(i + 1) * m];
        let g = &dp[i * m..(i + 1) * m];
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for j in 0..m {
            ds[i * m + j] = p[j] * (g[j] - dot) * scale;
        }
    }
    let gq = matmul(&ds, k.data(), n, m, d);
    let gk = matmul_tn(&ds, q.data(), n, m, d);
    Ok((
        Tensor::new(vec![n, d], gq)?,
        Tensor::new(vec![m, d], gk)?,
        Tensor::new(vec![m, dv], gv)?,
    ))
}

/// Cross-attention mask: rows of known pixels are all zero, others all one.
pub fn build_cross_mask(feature_mask: &RegionMask, text_len: usize) -> AttentionMask {
    let bits = feature_mask
        .bits()
        .iter()
        .flat_map(|known| std::iter::repeat_n(!known, text_len))
        .collect();
    AttentionMask {
        rows: feature_mask.bits().len(),
        cols: text_len,
        bits,
    }
}

/// Self-attention mask over the flattened feature grid (rows are queries).
pub fn build_self_mask(feature_mask: &RegionMask, rule: SelfMaskRule) -> AttentionMask {
    let known = feature_mask.bits();
    let n = known.len();
    let mut bits = Vec::with_capacity(n * n);
    for q in 0..n {
        for k in 0..n {
            let blocked = match rule {
                SelfMaskRule::KnownQueryUnknownKey => known[q] && !known[k],
                SelfMaskRule::UnknownQueryKnownKey => !known[q] && known[k],
            };
            bits.push(!blocked);
        }
    }
    AttentionMask {
        rows: n,
        cols: n,
        bits,
    }
}

/// Masks for one feature resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelMasks {
    pub height: usize,
    pub width: usize,
    pub feature_mask: RegionMask,
    pub self_mask: AttentionMask,
    pub cross_mask: AttentionMask,
}

/// Cross- and self-attention masks for every attention resolution of a
/// backbone, built for one text length.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AttentionMaskSet {
    levels: Vec<LevelMasks>,
    mode: MaskMode,
}

impl AttentionMaskSet {
    /// Downsamples the latent mask (all-known rule) to each `(h, w)` feature
    /// grid and builds both masks there.
    pub fn build(
        latent_mask: &RegionMask,
        sides: &[(usize, usize)],
        text_len: usize,
        rule: SelfMaskRule,
    ) -> Result<Self> {
        let mut levels = Vec::with_capacity(sides.len());
        for &(h, w) in sides {
            if h == 0 || !latent_mask.height().is_multiple_of(h) || !latent_mask.width().is_multiple_of(w) {
                return Err(Error::invalid(format!(
                    "feature grid {h}x{w} does not evenly divide latent mask {}x{}",
                    latent_mask.height(),
                    latent_mask.width()
                )));
            }
            let factor = latent_mask.height() / h;
            if latent_mask.width() / w != factor {
                return Err(Error::invalid("anisotropic feature downsampling"));
            }
            let feature_mask = downsample_mask(latent_mask, factor)?;
            levels.push(LevelMasks {
                height: h,
                width: w,
                self_mask: build_self_mask(&feature_mask, rule),
                cross_mask: build_cross_mask(&feature_mask, text_len),
                feature_mask,
            });
        }
        Ok(Self {
            levels,
            mode: MaskMode::PostSoftmax,
        })
    }

    /// Mask set that lets everything through; equivalent to no masking.
    pub fn all_ones(sides: &[(usize, usize)], text_len: usize) -> Self {
        let levels = sides
            .iter()
            .map(|&(h, w)| LevelMasks {
                height: h,
                width: w,
                feature_mask: RegionMask::filled(h, w, false),
                self_mask: AttentionMask::ones(h * w, h * w),
                cross_mask: AttentionMask::ones(h * w, text_len),
            })
            .collect();
        Self {
            levels,
            mode: MaskMode::PostSoftmax,
        }
    }

    pub fn with_mode(mut self, mode: MaskMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    pub fn level(&self, height: usize, width: usize) -> Option<&LevelMasks> {
        self.levels
            .iter()
            .find(|l| l.height == height && l.width == width)
    }

    pub fn levels(&self) -> &[LevelMasks] {
        &self.levels
    }
}
