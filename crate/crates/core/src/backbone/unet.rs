use std::sync::Arc;

use super::{BackboneConfig, Init, ParameterSet, TextInput, TokenSequence};
use crate::attention::AttentionMaskSet;
use crate::codec::LatentMap;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{sinusoidal, Tensor};

type Layout = Vec<(String, Vec<usize>, Init)>;

fn conv(layout: &mut Layout, name: &str, cin: usize, cout: usize, k: usize, gain: f64) {
    layout.push((
        format!("{name}.w"),
        vec![cout, cin, k, k],
        Init::Normal {
            fan_in: cin * k * k,
            gain,
        },
    ));
    layout.push((format!("{name}.b"), vec![cout], Init::Zeros));
}

fn linear(layout: &mut Layout, name: &str, fin: usize, fout: usize, bias: bool, gain: f64) {
    layout.push((format!("{name}.w"), vec![fin, fout], Init::Normal { fan_in: fin, gain }));
    if bias {
        layout.push((format!("{name}.b"), vec![fout], Init::Zeros));
    }
}

fn norm(layout: &mut Layout, name: &str, c: usize) {
    layout.push((format!("{name}.g"), vec![c], Init::Ones));
    layout.push((format!("{name}.b"), vec![c], Init::Zeros));
}

fn res_block(layout: &mut Layout, p: &str, cin: usize, cout: usize, tdim: usize) {
    norm(layout, &format!("{p}.norm1"), cin);
    conv(layout, &format!("{p}.conv1"), cin, cout, 3, 1.4);
    linear(layout, &format!("{p}.temb"), tdim, cout, true, 1.0);
    norm(layout, &format!("{p}.norm2"), cout);
    conv(layout, &format!("{p}.conv2"), cout, cout, 3, 0.5);
    if cin != cout {
        conv(layout, &format!("{p}.skip"), cin, cout, 1, 1.0);
    }
}

fn attn_block(layout: &mut Layout, p: &str, c: usize, text_dim: usize) {
    norm(layout, &format!("{p}.norm1"), c);
    for proj in ["q", "k", "v"] {
        linear(layout, &format!("{p}.self.{proj}"), c, c, false, 1.0);
    }
    linear(layout, &format!("{p}.self.o"), c, c, true, 0.5);
    norm(layout, &format!("{p}.norm2"), c);
    linear(layout, &format!("{p}.cross.q"), c, c, false, 1.0);
    linear(layout, &format!("{p}.cross.k"), text_dim, c, false, 1.0);
    linear(layout, &format!("{p}.cross.v"), text_dim, c, false, 1.0);
    linear(layout, &format!("{p}.cross.o"), c, c, true, 0.5);
}

/// Every parameter array of the network with its shape and initialiser.
pub(crate) fn parameter_layout(cfg: &BackboneConfig) -> Layout {
    let (b, b2, td) = (cfg.base_width, 2 * cfg.base_width, cfg.time_dim);
    let mut l = Layout::new();
    l.push((
        "text.embed".into(),
        vec![cfg.vocab_size, cfg.text_dim],
        Init::Normal { fan_in: 1, gain: 0.5 },
    ));
    linear(&mut l, "time.fc1", td, td, true, 1.0);
    linear(&mut l, "time.fc2", td, td, true, 1.0);
    conv(&mut l, "conv_in", cfg.in_channels, b, 3, 1.0);
    res_block(&mut l, "down0.res", b, b, td);
    conv(&mut l, "down0.down", b, b2, 3, 1.0);
    res_block(&mut l, "down1.res", b2, b2, td);
    attn_block(&mut l, "down1.attn", b2, cfg.text_dim);
    conv(&mut l, "down1.down", b2, b2, 3, 1.0);
    res_block(&mut l, "mid.res", b2, b2, td);
    attn_block(&mut l, "mid.attn", b2, cfg.text_dim);
    res_block(&mut l, "up1.res", 2 * b2, b2, td);
    attn_block(&mut l, "up1.attn", b2, cfg.text_dim);
    res_block(&mut l, "up0.res", b2 + b, b, td);
    norm(&mut l, "out.norm", b);
    conv(&mut l, "out.conv", b, cfg.in_channels, 3, 0.5);
    linear(&mut l, "out.gate", td, cfg.in_channels, true, 0.1);
    l
}

struct Ctx<'g, 'p> {
    cfg: &'g BackboneConfig,
    g: &'g mut Graph<'p>,
    params: &'p ParameterSet,
}

impl<'p> Ctx<'_, 'p> {
    fn p(&mut self, name: &str) -> Result<Var> {
        self.g.param(self.params, name)
    }

    fn conv(&mut self, x: Var, name: &str, stride: usize) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        let k = self.g.value(w).shape()[2];
        self.g.conv2d(x, w, b, stride, k / 2)
    }

    fn linear(&mut self, x: Var, name: &str, bias: bool) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = if bias { Some(self.p(&format!("{name}.b"))?) } else { None };
        self.g.linear(x, w, b)
    }

    fn norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let gamma = self.p(&format!("{name}.g"))?;
        let beta = self.p(&format!("{name}.b"))?;
        self.g.group_norm(x, gamma, beta, self.cfg.groups)
    }

    fn res_block(&mut self, x: Var, p: &str, temb: Var) -> Result<Var> {
        let cin = self.g.value(x).shape()[0];
        let h = self.norm(x, &format!("{p}.norm1"))?;
        let h = self.g.silu(h);
        let h = self.conv(h, &format!("{p}.conv1"), 1)?;
        let cout = self.g.value(h).shape()[0];
        let t = self.linear(temb, &format!("{p}.temb"), true)?;
        let h = self.g.add_channel(h, t)?;
        let h = self.norm(h, &format!("{p}.norm2"))?;
        let h = self.g.silu(h);
        let h = self.conv(h, &format!("{p}.conv2"), 1)?;
        let skip = if cin != cout {
            self.conv(x, &format!("{p}.skip"), 1)?
        } else {
            x
        };
        self.g.add(h, skip)
    }

    fn attn_block(&mut self, x: Var, p: &str, text: Var, masks: Option<&AttentionMaskSet>) -> Result<Var> {
        let (_, h, w) = self.g.value(x).dims3()?;
        let level = match masks {
            Some(set) => Some(set.level(h, w).ok_or_else(|| {
                Error::invalid(format!("attention mask set has no {h}x{w} level"))
            })?),
            None => None,
        };
        let mode = masks.map(|m| m.mode()).unwrap_or_default();

        let n = self.norm(x, &format!("{p}.norm1"))?;
        let tokens = self.g.to_tokens(n)?;
        let q = self.linear(tokens, &format!("{p}.self.q"), false)?;
        let k = self.linear(tokens, &format!("{p}.self.k"), false)?;
        let v = self.linear(tokens, &format!("{p}.self.v"), false)?;
        let a = self
            .g
            .attention(q, k, v, level.map(|l| Arc::new(l.self_mask.clone())), mode)?;
        let o = self.linear(a, &format!("{p}.self.o"), true)?;
        let o = self.g.from_tokens(o, h, w)?;
        let x = self.g.add(x, o)?;

        let n = self.norm(x, &format!("{p}.norm2"))?;
        let tokens = self.g.to_tokens(n)?;
        let q = self.linear(tokens, &format!("{p}.cross.q"), false)?;
        let k = self.linear(text, &format!("{p}.cross.k"), false)?;
        let v = self.linear(text, &format!("{p}.cross.v"), false)?;
        let cross = match level {
            Some(l) => {
                let text_len = self.g.value(text).shape()[0];
                if l.cross_mask.cols() != text_len {
                    return Err(Error::invalid(format!(
                        "cross mask built for {} tokens, text has {text_len}",
                        l.cross_mask.cols()
                    )));
                }
                Some(Arc::new(l.cross_mask.clone()))
            }
            None => None,
        };
        let a = self.g.attention(q, k, v, cross, mode)?;
        let o = self.linear(a, &format!("{p}.cross.o"), true)?;
        let o = self.g.from_tokens(o, h, w)?;
        self.g.add(x, o)
    }
}

/// Embedding lookup plus fixed sinusoidal positions: `[L, text_dim]`.
pub(crate) fn text_features<'p>(
    cfg: &BackboneConfig,
    g: &mut Graph<'p>,
    params: &'p ParameterSet,
    tokens: &TokenSequence,
) -> Result<Var> {
    if tokens.len() > cfg.max_tokens {
        return Err(Error::invalid(format!(
            "{} tokens exceed context length {}",
            tokens.len(),
            cfg.max_tokens
        )));
    }
    let ids: Vec<usize> = tokens.ids().iter().map(|id| *id as usize).collect();
    let table = g.param(params, "text.embed")?;
    let emb = g.embedding(table, &ids)?;
    let mut pos = Vec::with_capacity(ids.len() * cfg.text_dim);
    for i in 0..ids.len() {
        pos.extend(sinusoidal(i as f64, cfg.text_dim));
    }
    let pos = g.constant(Tensor::new(vec![ids.len(), cfg.text_dim], pos)?);
    g.add(emb, pos)
}

pub(crate) fn forward<'p>(
    cfg: &BackboneConfig,
    g: &mut Graph<'p>,
    params: &'p ParameterSet,
    x_t: &LatentMap,
    text: TextInput<'_>,
    t: usize,
    masks: Option<&AttentionMaskSet>,
) -> Result<Var> {
    let text = match text {
        TextInput::Tokens(tokens) => text_features(cfg, g, params, tokens)?,
        TextInput::Embedding(e) => {
            if e.dim() != cfg.text_dim {
                return Err(Error::shape(&[e.len(), cfg.text_dim], e.tensor().shape()));
            }
            g.constant(e.tensor().clone())
        }
    };
    let mut cx = Ctx { cfg, g, params };

    let temb = cx.g.constant(Tensor::new(vec![1, cfg.time_dim], sinusoidal(t as f64, cfg.time_dim))?);
    let temb = cx.linear(temb, "time.fc1", true)?;
    let temb = cx.g.silu(temb);
    let temb = cx.linear(temb, "time.fc2", true)?;
    let temb = cx.g.silu(temb);

    let [c, h, w] = x_t.shape();
    let input = cx.g.constant(Tensor::new(vec![c, h, w], x_t.data().to_vec())?);
    let x = cx.conv(input, "conv_in", 1)?;
    let skip0 = cx.res_block(x, "down0.res", temb)?;
    let x = cx.conv(skip0, "down0.down", 2)?;
    let x = cx.res_block(x, "down1.res", temb)?;
    let skip1 = cx.attn_block(x, "down1.attn", text, masks)?;
    let x = cx.conv(skip1, "down1.down", 2)?;
    let x = cx.res_block(x, "mid.res", temb)?;
    let x = cx.attn_block(x, "mid.attn", text, masks)?;
    let x = cx.g.upsample2(x)?;
    let x = cx.g.concat(x, skip1)?;
    let x = cx.res_block(x, "up1.res", temb)?;
    let x = cx.attn_block(x, "up1.attn", text, masks)?;
    let x = cx.g.upsample2(x)?;
    let x = cx.g.concat(x, skip0)?;
    let x = cx.res_block(x, "up0.res", temb)?;
    let x = cx.norm(x, "out.norm")?;
    let x = cx.g.silu(x);
    let x = cx.conv(x, "out.conv", 1)?;

    // Per-channel, time-dependent pass-through of the input. The latent has
    // far more channels than the network is wide, so the part of the noise
    // that is visible directly in x_t bypasses the bottleneck.
    let gate = cx.linear(temb, "out.gate", true)?;
    let passthrough = cx.g.scale_channel(input, gate)?;
    cx.g.add(x, passthrough)
}
