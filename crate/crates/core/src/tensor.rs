//! Dense row-major `f64` tensors and the kernels the backbone is built from.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(&shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(shape, &self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Rows x cols view for rank-2 tensors.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::invalid(format!("expected rank-2 tensor, got {:?}", self.shape))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [a, b, c] => Ok((*a, *b, *c)),
            _ => Err(Error::invalid(format!("expected rank-3 tensor, got {:?}", self.shape))),
        }
    }
}

/// `a[m,k] · b[k,n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    par::for_each_chunk_mut(&mut out, n.max(1), |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    out
}

/// `aᵀ · b` with `a[k,m]`, `b[k,n]`.
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    par::for_each_chunk_mut(&mut out, n.max(1), |i, row| {
        for p in 0..k {
            let av = a[p * m + i];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    out
}

/// `a · bᵀ` with `a[m,k]`, `b[n,k]`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    par::for_each_chunk_mut(&mut out, n.max(1), |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    });
    out
}

/// Geometry of a square-kernel 2-D convolution over a single CHW image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }
}

pub fn conv2d(x: &[f64], w: &[f64], b: &[f64], g: ConvGeom) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let (h, wd, kk) = (g.height, g.width, g.kernel);
    let mut out = vec![0.0; g.out_ch * oh * ow];
    par::for_each_chunk_mut(&mut out, oh * ow, |co, plane| {
        plane.fill(b[co]);
        for ci in 0..g.in_ch {
            let xin = &x[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..kk {
                for kx in 0..kk {
                    let wv = w[((co * g.in_ch + ci) * kk + ky) * kk + kx];
                    for oy in 0..oh {
                        let Some(iy) = g.src(oy, ky, h) else { continue };
                        for ox in 0..ow {
                            if let Some(ix) = g.src(ox, kx, wd) {
                                plane[oy * ow + ox] += wv * xin[iy * wd + ix];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Returns `(grad_w, grad_b)`.
pub fn conv2d_grad_params(x: &[f64], gout: &[f64], g: ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let (oh, ow) = g.out_hw();
    let (h, wd, kk) = (g.height, g.width, g.kernel);
    let per_out = g.in_ch * kk * kk;
    let mut gw = vec![0.0; g.out_ch * per_out];
    par::for_each_chunk_mut(&mut gw, per_out, |co, chunk| {
        let go = &gout[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..g.in_ch {
            let xin = &x[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..kk {
                for kx in 0..kk {
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let Some(iy) = g.src(oy, ky, h) else { continue };
                        for ox in 0..ow {
                            if let Some(ix) = g.src(ox, kx, wd) {
                                acc += go[oy * ow + ox] * xin[iy * wd + ix];
                            }
                        }
                    }
                    chunk[(ci * kk + ky) * kk + kx] = acc;
                }
            }
        }
    });
    let gb = (0..g.out_ch)
        .map(|co| gout[co * oh * ow..(co + 1) * oh * ow].iter().sum())
        .collect();
    (gw, gb)
}

pub fn conv2d_grad_input(w: &[f64], gout: &[f64], g: ConvGeom) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let (h, wd, kk) = (g.height, g.width, g.kernel);
    let mut gx = vec![0.0; g.in_ch * h * wd];
    par::for_each_chunk_mut(&mut gx, h * wd, |ci, plane| {
        for co in 0..g.out_ch {
            let go = &gout[co * oh * ow..(co + 1) * oh * ow];
            for ky in 0..kk {
                for kx in 0..kk {
                    let wv = w[((co * g.in_ch + ci) * kk + ky) * kk + kx];
                    for oy in 0..oh {
                        let Some(iy) = g.src(oy, ky, h) else { continue };
                        for ox in 0..ow {
                            if let Some(ix) = g.src(ox, kx, wd) {
                                plane[iy * wd + ix] += wv * go[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Group normalisation over a CHW tensor. Returns `(y, xhat, rstd)`.
#[allow(clippy::needless_range_loop)]
pub fn group_norm(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    channels: usize,
    plane: usize,
    groups: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let per_group = channels / groups * plane;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; groups];
    for grp in 0..groups {
        let span = grp * per_group..(grp + 1) * per_group;
        let xs = &x[span.clone()];
        let mean = xs.iter().sum::<f64>() / per_group as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per_group as f64;
        let r = 1.0 / (var + GROUP_NORM_EPS).sqrt();
        rstd[grp] = r;
        for (o, v) in xhat[span].iter_mut().zip(xs) {
            *o = (v - mean) * r;
        }
    }
    let mut y = vec![0.0; x.len()];
    for c in 0..channels {
        for i in c * plane..(c + 1) * plane {
            y[i] = xhat[i] * gamma[c] + beta[c];
        }
    }
    (y, xhat, rstd)
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
#[allow(clippy::needless_range_loop)]
pub fn group_norm_grad(
    gout: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    gamma: &[f64],
    channels: usize,
    plane: usize,
    groups: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut ggamma = vec![0.0; channels];
    let mut gbeta = vec![0.0; channels];
    let mut dxhat = vec![0.0; gout.len()];
    for c in 0..channels {
        for i in c * plane..(c + 1) * plane {
            ggamma[c] += gout[i] * xhat[i];
            gbeta[c] += gout[i];
            dxhat[i] = gout[i] * gamma[c];
        }
    }
    let per_group = channels / groups * plane;
    let mut gx = vec![0.0; gout.len()];
    for grp in 0..groups {
        let span = grp * per_group..(grp + 1) * per_group;
        let n = per_group as f64;
        let mean_d = dxhat[span.clone()].iter().sum::<f64>() / n;
        let mean_dx = dxhat[span.clone()]
            .iter()
            .zip(&xhat[span.clone()])
            .map(|(d, xh)| d * xh)
            .sum::<f64>()
            / n;
        for i in span {
            gx[i] = rstd[grp] * (dxhat[i] - mean_d - xhat[i] * mean_dx);
        }
    }
    (gx, ggamma, gbeta)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Sinusoidal embedding of a scalar position into `dim` features
/// (`dim / 2` sines followed by `dim / 2` cosines).
pub fn sinusoidal(position: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half.max(1) as f64).exp();
        out[i] = (position * freq).sin();
        out[half + i] = (position * freq).cos();
    }
    out
}
