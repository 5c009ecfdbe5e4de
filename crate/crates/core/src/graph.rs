//! Minimal reverse-mode autodiff tape over [`Tensor`]s.
//!
//! A [`Graph`] records every op applied during one forward pass. Parameters
//! are borrowed from a [`ParameterSet`] so inference allocates nothing beyond
//! activations; [`Graph::backward`] returns gradients keyed by parameter name.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::attention::{attend, attend_backward, AttentionMask, MaskMode};
use crate::backbone::ParameterSet;
use crate::error::{Error, Result};
use crate::tensor::{
    conv2d, conv2d_grad_input, conv2d_grad_params, group_norm, group_norm_grad, matmul, matmul_nt,
    matmul_tn, sigmoid, ConvGeom, Tensor,
};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(String),
    Add(Var, Var),
    AddChannel(Var, Var),
    ScaleChannel(Var, Var),
    Silu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Concat(Var, Var),
    Upsample2(Var),
    ToTokens(Var),
    FromTokens(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        mask: Option<Arc<AttentionMask>>,
        mode: MaskMode,
        probs: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    tracked: bool,
}

pub type Gradients = BTreeMap<String, Tensor>;

pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    track: bool,
}

impl<'a> Graph<'a> {
    /// `track = false` builds an inference-only tape.
    pub fn new(track: bool) -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            track,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, parents: &[Var]) -> Var {
        let tracked = self.track
            && (matches!(op, Op::Param(_)) || parents.iter().any(|p| self.nodes[p.0].tracked));
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, &[])
    }

    pub fn param(&mut self, params: &'a ParameterSet, name: &str) -> Result<Var> {
        let t = params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))?;
        Ok(self.push(Cow::Borrowed(t), Op::Param(name.to_string()), &[]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(ta.shape(), tb.shape()));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        Ok(self.push(Cow::Owned(out), Op::Add(a, b), &[a, b]))
    }

    /// `x[c, h, w] + v[c]` (v may be `[c]` or `[1, c]`).
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let vt = self.value(v);
        if vt.len() != c {
            return Err(Error::shape(&[c], vt.shape()));
        }
        let mut out = self.value(x).clone();
        let plane = h * w;
        for (ch, bias) in vt.data().iter().enumerate() {
            out.data_mut()[ch * plane..(ch + 1) * plane]
                .iter_mut()
                .for_each(|o| *o += bias);
        }
        Ok(self.push(Cow::Owned(out), Op::AddChannel(x, v), &[x, v]))
    }

    /// `x[c, h, w] * v[c]` (v may be `[c]` or `[1, c]`).
    pub fn scale_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let vt = self.value(v);
        if vt.len() != c {
            return Err(Error::shape(&[c], vt.shape()));
        }
        let mut out = self.value(x).clone();
        let plane = h * w;
        for (ch, scale) in vt.data().iter().enumerate() {
            out.data_mut()[ch * plane..(ch + 1) * plane]
                .iter_mut()
                .for_each(|o| *o *= scale);
        }
        Ok(self.push(Cow::Owned(out), Op::ScaleChannel(x, v), &[x, v]))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * sigmoid(*v)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(Cow::Owned(out), Op::Silu(x), &[x])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ci, h, wd) = self.value(x).dims3()?;
        let wt = self.value(w);
        let [co, wci, k, k2] = wt.shape() else {
            return Err(Error::invalid(format!("conv weight must be rank 4, got {:?}", wt.shape())));
        };
        if *wci != ci || k != k2 || self.value(b).len() != *co {
            return Err(Error::shape(&[*co, ci, *k, *k], wt.shape()));
        }
        let geom = ConvGeom {
            in_ch: ci,
            out_ch: *co,
            height: h,
            width: wd,
            kernel: *k,
            stride,
            pad,
        };
        let (oh, ow) = geom.out_hw();
        let data = conv2d(self.value(x).data(), wt.data(), self.value(b).data(), geom);
        let out = Tensor::new(vec![geom.out_ch, oh, ow], data)?;
        Ok(self.push(Cow::Owned(out), Op::Conv2d { x, w, b, geom }, &[x, w, b]))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::invalid(format!("{c} channels not divisible into {groups} groups")));
        }
        let (y, xhat, rstd) = group_norm(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            c,
            h * w,
            groups,
        );
        let out = Tensor::new(vec![c, h, w], y)?;
        Ok(self.push(
            Cow::Owned(out),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// `x[n, in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, fin) = self.value(x).dims2()?;
        let (win, fout) = self.value(w).dims2()?;
        if win != fin {
            return Err(Error::shape(&[fin, fout], self.value(w).shape()));
        }
        let mut data = matmul(self.value(x).data(), self.value(w).data(), n, fin, fout);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in data.chunks_mut(fout) {
                row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
            }
        }
        let out = Tensor::new(vec![n, fout], data)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Cow::Owned(out), Op::Linear { x, w, b }, &parents))
    }

    /// Channel concatenation of two CHW tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, h, w) = self.value(a).dims3()?;
        let (cb, hb, wb) = self.value(b).dims3()?;
        if (h, w) != (hb, wb) {
            return Err(Error::shape(&[cb, h, w], self.value(b).shape()));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let out = Tensor::new(vec![ca + cb, h, w], data)?;
        Ok(self.push(Cow::Owned(out), Op::Concat(a, b), &[a, b]))
    }

    /// Nearest-neighbour 2x upsampling of a CHW tensor.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let src = self.value(x).data();
        let mut data = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    data[(ch * 2 * h + y) * 2 * w + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::new(vec![c, 2 * h, 2 * w], data)?;
        Ok(self.push(Cow::Owned(out), Op::Upsample2(x), &[x]))
    }

    /// `[c, h, w] -> [h·w, c]`.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let out = Tensor::new(vec![h * w, c], transpose(self.value(x).data(), c, h * w))?;
        Ok(self.push(Cow::Owned(out), Op::ToTokens(x), &[x]))
    }

    /// `[h·w, c] -> [c, h, w]`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (n, c) = self.value(x).dims2()?;
        if n != h * w {
            return Err(Error::shape(&[h * w, c], self.value(x).shape()));
        }
        let out = Tensor::new(vec![c, h, w], transpose(self.value(x).data(), n, c))?;
        Ok(self.push(Cow::Owned(out), Op::FromTokens(x), &[x]))
    }

    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<Arc<AttentionMask>>,
        mode: MaskMode,
    ) -> Result<Var> {
        let res = attend(self.value(q), self.value(k), self.value(v), mask.as_deref(), mode)?;
        Ok(self.push(
            Cow::Owned(res.output),
            Op::Attention {
                q,
                k,
                v,
                mask,
                mode,
                probs: res.probs,
            },
            &[q, k, v],
        ))
    }

    /// Row lookup `table[ids]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, dim) = self.value(table).dims2()?;
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= rows {
                return Err(Error::invalid(format!("token id {id} outside vocabulary of {rows}")));
            }
            data.extend_from_slice(&src[id * dim..(id + 1) * dim]);
        }
        let out = Tensor::new(vec![ids.len(), dim], data)?;
        Ok(self.push(
            Cow::Owned(out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Back-propagates `seed` (the gradient of some scalar with respect to
    /// `root`) and returns parameter gradients.
    pub fn backward(&self, root: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(root).shape() {
            return Err(Error::shape(self.value(root).shape(), seed.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        let mut out = Gradients::new();
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let mut send = |v: Var, t: Tensor| {
                if !self.nodes[v.0].tracked {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => match out.get_mut(name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.insert(name.clone(), g);
                    }
                },
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::AddChannel(x, v) => {
                    let vt = self.value(*v);
                    let plane = g.len() / vt.len();
                    let data = g.data().chunks(plane).map(|c| c.iter().sum()).collect();
                    send(*v, Tensor::new(vt.shape().to_vec(), data)?);
                    send(*x, g);
                }
                Op::ScaleChannel(x, v) => {
                    let (xt, vt) = (self.value(*x), self.value(*v));
                    let plane = g.len() / vt.len();
                    let gv = g
                        .data()
                        .chunks(plane)
                        .zip(xt.data().chunks(plane))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                        .collect();
                    let gx = g
                        .data()
                        .chunks(plane)
                        .zip(vt.data())
                        .flat_map(|(gc, s)| gc.iter().map(move |a| a * s))
                        .collect();
                    send(*v, Tensor::new(vt.shape().to_vec(), gv)?);
                    send(*x, Tensor::new(xt.shape().to_vec(), gx)?);
                }
                Op::Silu(x) => {
                    let xt = self.value(*x);
                    let data = xt
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(v, gv)| {
                            let s = sigmoid(*v);
                            gv * s * (1.0 + v * (1.0 - s))
                        })
                        .collect();
                    send(*x, Tensor::new(xt.shape().to_vec(), data)?);
                }
                Op::Conv2d { x, w, b, geom } => {
                    if self.nodes[x.0].tracked {
                        let gx = conv2d_grad_input(self.value(*w).data(), g.data(), *geom);
                        send(*x, Tensor::new(self.value(*x).shape().to_vec(), gx)?);
                    }
                    let (gw, gb) = conv2d_grad_params(self.value(*x).data(), g.data(), *geom);
                    send(*w, Tensor::new(self.value(*w).shape().to_vec(), gw)?);
                    send(*b, Tensor::new(self.value(*b).shape().to_vec(), gb)?);
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    xhat,
                    rstd,
                } => {
                    let (c, h, w) = self.value(*x).dims3()?;
                    let (gx, gg, gb) = group_norm_grad(
                        g.data(),
                        xhat,
                        rstd,
                        self.value(*gamma).data(),
                        c,
                        h * w,
                        *groups,
                    );
                    send(*x, Tensor::new(vec![c, h, w], gx)?);
                    send(*gamma, Tensor::new(vec![c], gg)?);
                    send(*beta, Tensor::new(vec![c], gb)?);
                }
                Op::Linear { x, w, b } => {
                    let (n, fin) = self.value(*x).dims2()?;
                    let fout = g.dims2()?.1;
                    if self.nodes[x.0].tracked {
                        let gx = matmul_nt(g.data(), self.value(*w).data(), n, fout, fin);
                        send(*x, Tensor::new(vec![n, fin], gx)?);
                    }
                    let gw = matmul_tn(self.value(*x).data(), g.data(), n, fin, fout);
                    send(*w, Tensor::new(vec![fin, fout], gw)?);
                    if let Some(b) = b {
                        let mut gb = vec![0.0; fout];
                        for row in g.data().chunks(fout) {
                            gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                        }
                        send(*b, Tensor::new(self.value(*b).shape().to_vec(), gb)?);
                    }
                }
                Op::Concat(a, b) => {
                    let split = self.value(*a).len();
                    let (ga, gb) = g.data().split_at(split);
                    send(*a, Tensor::new(self.value(*a).shape().to_vec(), ga.to_vec())?);
                    send(*b, Tensor::new(self.value(*b).shape().to_vec(), gb.to_vec())?);
                }
                Op::Upsample2(x) => {
                    let (c, h, w) = self.value(*x).dims3()?;
                    let mut gx = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                gx[(ch * h + y / 2) * w + xx / 2] += g.data()[(ch * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                    send(*x, Tensor::new(vec![c, h, w], gx)?);
                }
                Op::ToTokens(x) => {
                    let (c, h, w) = self.value(*x).dims3()?;
                    send(*x, Tensor::new(vec![c, h, w], transpose(g.data(), h * w, c))?);
                }
                Op::FromTokens(x) => {
                    let (n, c) = self.value(*x).dims2()?;
                    send(*x, Tensor::new(vec![n, c], transpose(g.data(), c, n))?);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    mask,
                    mode,
                    probs,
                } => {
                    let (gq, gk, gv) = attend_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        probs,
                        mask.as_deref(),
                        *mode,
                        &g,
                    )?;
                    send(*q, gq);
                    send(*k, gk);
                    send(*v, gv);
                }
                Op::Embedding { table, ids } => {
                    let (rows, dim) = self.value(*table).dims2()?;
                    let mut gt = vec![0.0; rows * dim];
                    for (row, &id) in g.data().chunks(dim).zip(ids) {
                        gt[id * dim..(id + 1) * dim]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(a, r)| *a += r);
                    }
                    send(*table, Tensor::new(vec![rows, dim], gt)?);
                }
            }
        }
        Ok(out)
    }
}

/// Transposes a row-major `rows x cols` matrix.
fn transpose(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}
