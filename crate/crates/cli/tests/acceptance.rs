//! Acceptance suite: one PASS/FAIL line per primary criterion. Runs as a
//! plain binary so the lines always reach the test log.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use base64::Engine;
use inpaint_core::attention::{
    attend, attention, build_cross_mask, build_self_mask, AttentionMask, AttentionMaskSet, MaskMode, SelfMaskRule,
};
use inpaint_core::backbone::text::{TextEmbedding, TokenSequence};
use inpaint_core::backbone::{
    load_checkpoint, Backbone, BackboneConfig, DiffusionModel, NoisePredictor, ParameterSet, Preset,
};
use inpaint_core::codec::{downsample_mask, ImageBuffer, LatentCodec, LatentMap, RegionMask, SpaceToDepth};
use inpaint_core::finetune::{bg_loss, ddpm_loss, masked_mse, run_finetune, smoothed, FinetuneConfig};
use inpaint_core::guidance::{
    validate_spec, GuidanceSpec, JointEmbedder, StrokeMap, TokenTable, ToyJointEmbedder,
};
use inpaint_core::metrics::stroke_rmse;
use inpaint_core::raster::{decode_rgb, load_rgb, save_mask_png, save_png};
use inpaint_core::sampler::{
    blend_known, inpaint, output_noise, sample_latents, tau_step, SamplerConfig, StepEvent,
};
use inpaint_core::schedule::{add_noise, cfg_combine, ddim_step, ddim_update, NoiseSchedule};
use inpaint_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_latent(r: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> LatentMap {
    LatentMap::new(c, h, w, (0..c * h * w).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap()
}

fn random_tensor(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| r.random_range(-1.5..1.5)).collect()).unwrap()
}

fn random_mask(r: &mut ChaCha8Rng, h: usize, w: usize) -> RegionMask {
    RegionMask::from_fn(h, w, |_, _| r.random_bool(0.5))
}

fn rel_close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * b.abs().max(a.abs()) + 1e-15
}

// ---------------------------------------------------------------------------
// Fixtures

fn gradient_image(h: usize, w: usize, phase: usize) -> ImageBuffer {
    ImageBuffer::from_fn(h, w, 3, |y, x, c| ((y * 7 + x * 3 + c * 5 + phase) % 17) as f32 / 16.0).unwrap()
}

fn rect_hole(h: usize, w: usize, ys: std::ops::Range<usize>, xs: std::ops::Range<usize>) -> RegionMask {
    RegionMask::from_fn(h, w, |y, x| !(ys.contains(&y) && xs.contains(&x)))
}

fn disc_hole(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> RegionMask {
    RegionMask::from_fn(h, w, |y, x| {
        let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
        dy * dy + dx * dx > r * r
    })
}

/// RGBA stroke layer painting `color` over the given square.
fn stroke_layer(h: usize, w: usize, ys: std::ops::Range<usize>, xs: std::ops::Range<usize>, color: [f32; 3]) -> ImageBuffer {
    ImageBuffer::from_fn(h, w, 4, |y, x, c| {
        let inside = ys.contains(&y) && xs.contains(&x);
        match c {
            3 => f32::from(u8::from(inside)),
            c => color[c],
        }
    })
    .unwrap()
}

/// Noise predictor that records every call and answers with an affine map of
/// its input, so the sampler's arithmetic can be replayed exactly.
#[derive(Default)]
struct Recorder {
    calls: Mutex<Vec<(usize, Vec<u32>, LatentMap)>>,
}

impl Recorder {
    fn respond(x: &LatentMap, ids: &[u32]) -> LatentMap {
        let bias = ids.iter().map(|&i| f64::from(i)).sum::<f64>() * 1e-4;
        LatentMap::new(x.channels(), x.height(), x.width(), x.data().iter().map(|v| 0.3 * v + bias).collect()).unwrap()
    }

    fn take(&self) -> Vec<(usize, Vec<u32>, LatentMap)> {
        std::mem::take(&mut *self.calls.lock().unwrap())
    }
}

impl NoisePredictor for Recorder {
    fn encode_text(&self, tokens: &TokenSequence) -> inpaint_core::Result<TextEmbedding> {
        let ids: Vec<f64> = tokens.ids().iter().map(|&i| f64::from(i)).collect();
        TextEmbedding::new(Tensor::new(vec![ids.len(), 1], ids)?)
    }

    fn predict_noise(
        &self,
        x_t: &LatentMap,
        text: &TextEmbedding,
        t: usize,
        _masks: Option<&AttentionMaskSet>,
    ) -> inpaint_core::Result<LatentMap> {
        let ids: Vec<u32> = text.tensor().data().iter().map(|&v| v as u32).collect();
        let out = Self::respond(x_t, &ids);
        self.calls.lock().unwrap().push((t, ids, x_t.clone()));
        Ok(out)
    }

    fn attention_sides(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        vec![(h, w)]
    }
}

// ---------------------------------------------------------------------------
// 1. Known-region exactness

fn known_region_exactness() -> Outcome {
    let codec = ok(SpaceToDepth::new(4))?;
    let params = Arc::new(ok(ParameterSet::init(
        BackboneConfig::preset(Preset::Tiny, codec.latent_channels()),
        0,
    ))?);
    let model = ok(DiffusionModel::new(params.clone()))?;
    let sched = NoiseSchedule::default();
    // Latent-aligned holes are checked without paste-back, so exactness comes
    // from the sampler alone; ragged holes use the default pipeline.
    let fixtures = [
        ("aligned16", gradient_image(16, 16, 0), rect_hole(16, 16, 4..12, 4..12), (6..10, 6..10), false),
        ("aligned32", gradient_image(32, 32, 3), rect_hole(32, 32, 8..24, 12..28), (12..18, 16..22), false),
        ("disc16", gradient_image(16, 16, 5), disc_hole(16, 16, 8.0, 8.0, 5.0), (7..9, 7..9), true),
        ("disc32", gradient_image(32, 32, 9), disc_hole(32, 32, 15.0, 17.0, 9.5), (12..18, 14..20), true),
    ];
    let mut runs = 0;
    for (name, image, mask, (sy, sx), paste_back) in fixtures {
        let (h, w) = (image.height(), image.width());
        let stroke = || StrokeMap::from_rgba(&stroke_layer(h, w, sy.clone(), sx.clone(), [0.9, 0.1, 0.2]), &codec).unwrap();
        let modes: [(&str, GuidanceSpec); 5] = [
            ("unconditional", GuidanceSpec::unconditional(1)),
            ("text", GuidanceSpec { prompt: Some("a red hat".into()), seed: 2, ..GuidanceSpec::default() }),
            ("exemplar", GuidanceSpec { subject_token: Some(777), seed: 3, ..GuidanceSpec::default() }),
            ("stroke", GuidanceSpec { stroke: Some(stroke()), tau: Some(0.5), seed: 4, ..GuidanceSpec::default() }),
            (
                "mixed",
                GuidanceSpec {
                    prompt: Some("a red hat".into()),
                    subject_token: Some(777),
                    stroke: Some(stroke()),
                    tau: Some(0.6),
                    seed: 5,
                    num_outputs: 2,
                    ..GuidanceSpec::default()
                },
            ),
        ];
        let cfg = SamplerConfig { num_steps: 6, paste_back, ..SamplerConfig::default() };
        for (mode, spec) in modes {
            let valid = ok(validate_spec(&spec, &mask))?;
            let outs = ok(inpaint(&model, &codec, &image, &mask, &valid, &cfg, &sched, None))?;
            for out in &outs {
                for y in 0..h {
                    for x in 0..w {
                        if !mask.is_known(y, x) {
                            continue;
                        }
                        for c in 0..3 {
                            ensure!(
                                out.get(y, x, c).to_bits() == image.get(y, x, c).to_bits(),
                                "{name}/{mode}: pixel ({y},{x},{c}) is {} not {}",
                                out.get(y, x, c),
                                image.get(y, x, c)
                            );
                        }
                    }
                }
            }
            runs += 1;
        }
    }
    Ok(format!("{runs} combinations, max known-pixel error 0"))
}

// ---------------------------------------------------------------------------
// 2. DDIM golden vectors

/// Closed form of the deterministic update, written in the expanded
/// `a x + b eps` shape rather than through the clean-image estimate.
fn ddim_oracle(x: f64, e: f64, ab_t: f64, ab_prev: f64) -> f64 {
    let a = (ab_prev / ab_t).sqrt();
    let b = (1.0 - ab_prev).sqrt() - (ab_prev * (1.0 - ab_t) / ab_t).sqrt();
    a * x + b * e
}

fn ddim_golden() -> Outcome {
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let ab_t: f64 = r.random_range(0.001..0.98);
        let ab_prev: f64 = r.random_range(ab_t + 1e-3..1.0);
        let xs: Vec<f64> = (0..4).map(|_| r.random_range(-3.0..3.0)).collect();
        let es: Vec<f64> = (0..4).map(|_| r.random_range(-3.0..3.0)).collect();
        let sched = ok(NoiseSchedule::from_alpha_bar(vec![1.0, ab_prev, ab_t]))?;
        let out = ok(ddim_step(
            &ok(LatentMap::new(1, 2, 2, xs.clone()))?,
            &ok(LatentMap::new(1, 2, 2, es.clone()))?,
            2,
            1,
            &sched,
        ))?;
        for k in 0..4 {
            let want = ddim_oracle(xs[k], es[k], ab_t, ab_prev);
            let got = out.data()[k];
            worst = worst.max((got - want).abs() / want.abs().max(1e-12));
            ensure!(rel_close(got, want, 1e-6), "tuple {i}: {got} vs oracle {want}");
        }
    }
    let mut r = rng(3);
    for _ in 0..20 {
        let (x, e) = (r.random_range(-3.0..3.0), r.random_range(-3.0..3.0));
        let ab: f64 = r.random_range(0.01..0.99);
        ensure!(rel_close(ddim_update(x, e, ab, ab), x, 1e-12), "equal alpha_bar is not the identity");
        let ab_prev: f64 = r.random_range(ab..1.0);
        ensure!(
            rel_close(ddim_update(x, 0.0, ab, ab_prev), (ab_prev / ab).sqrt() * x, 1e-12),
            "zero noise is not a rescale"
        );
        let x0 = (x - (1.0 - ab).sqrt() * e) / ab.sqrt();
        ensure!(rel_close(ddim_update(x, e, ab, 1.0), x0, 1e-12), "alpha_bar_prev = 1 is not the x0 estimate");
    }
    let sched = NoiseSchedule::default();
    let x = random_latent(&mut r, 2, 2, 2);
    let e = random_latent(&mut r, 2, 2, 2);
    let last = ok(ddim_step(&x, &e, 20, 0, &sched))?;
    let ab = ok(sched.alpha_bar(20))?;
    for k in 0..8 {
        let x0 = (x.data()[k] - (1.0 - ab).sqrt() * e.data()[k]) / ab.sqrt();
        ensure!(rel_close(last.data()[k], x0, 1e-12), "final step to t=0 is not the x0 estimate");
    }
    Ok(format!("50 tuples, worst relative error {worst:.2e}; 3 degenerate identities hold"))
}

// ---------------------------------------------------------------------------
// 3. Loss identities and gradient masking

fn loss_identities() -> Outcome {
    let mut r = rng(4);
    let (c, h, w) = (4, 4, 4);
    let mut fd_worst: f64 = 0.0;
    for trial in 0..10 {
        let eps = random_latent(&mut r, c, h, w);
        let pred = random_latent(&mut r, c, h, w);
        let none = ok(masked_mse(&eps, &pred, &RegionMask::filled(h, w, false)))?;
        ensure!(none.loss == 0.0, "empty mask loss {}", none.loss);
        ensure!(none.grad.data().iter().all(|g| *g == 0.0), "empty mask gradient is not zero");
        let all = ok(masked_mse(&eps, &pred, &RegionMask::filled(h, w, true)))?;
        let full = ok(ddpm_loss(&eps, &pred))?;
        ensure!(all.loss.to_bits() == full.to_bits(), "full mask {} vs unmasked {}", all.loss, full);

        let m = random_mask(&mut r, h, w);
        let mse = ok(masked_mse(&eps, &pred, &m))?;
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let g = mse.grad.get(ch, y, x);
                    if !m.is_known(y, x) {
                        ensure!(g == 0.0, "trial {trial}: gradient {g} on an unknown cell");
                        continue;
                    }
                    let step = 1e-6;
                    let mut plus = pred.clone();
                    plus.set(ch, y, x, pred.get(ch, y, x) + step);
                    let mut minus = pred.clone();
                    minus.set(ch, y, x, pred.get(ch, y, x) - step);
                    let fd = (ok(masked_mse(&eps, &plus, &m))?.loss - ok(masked_mse(&eps, &minus, &m))?.loss)
                        / (2.0 * step);
                    fd_worst = fd_worst.max((fd - g).abs() / g.abs().max(1e-12));
                    ensure!(rel_close(fd, g, 1e-4), "trial {trial}: gradient {g} vs finite difference {fd}");
                }
            }
        }
    }

    // The same identities through the network's background loss.
    let config = BackboneConfig::preset(Preset::Tiny, 48);
    let params = ok(ParameterSet::init(config, 1))?;
    let backbone = ok(Backbone::new(config))?;
    let model = ok(DiffusionModel::new(Arc::new(params.clone())))?;
    let sched = NoiseSchedule::default();
    let x_in = random_latent(&mut r, 48, 4, 4);
    let eps = random_latent(&mut r, 48, 4, 4);
    for t in [1, 400, 1000] {
        let zero = ok(bg_loss(&backbone, &params, &x_in, &RegionMask::filled(4, 4, false), t, &eps, &sched))?;
        ensure!(zero == 0.0, "bg loss {zero} with an empty mask");
        let full = ok(bg_loss(&backbone, &params, &x_in, &RegionMask::filled(4, 4, true), t, &eps, &sched))?;
        let x_t = ok(add_noise(&x_in, t, &eps, &sched))?;
        let text = ok(model.encode_text(&TokenSequence::null()))?;
        let pred = ok(model.predict_noise(&x_t, &text, t, None))?;
        let plain = ok(ddpm_loss(&eps, &pred))?;
        ensure!(full.to_bits() == plain.to_bits(), "t={t}: bg loss {full} vs unmasked {plain}");
    }
    Ok(format!("empty/full mask identities exact; finite differences within {fd_worst:.1e} relative"))
}

// ---------------------------------------------------------------------------
// 4. Classifier-free guidance identities

fn cfg_identities() -> Outcome {
    let mut r = rng(5);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let u = random_latent(&mut r, 3, 3, 3);
        let c = random_latent(&mut r, 3, 3, 3);
        ensure!(ok(cfg_combine(&u, &c, 1.0))? == c, "s = 1 does not return the conditional branch");
        let s: f64 = r.random_range(0.0..20.0);
        ensure!(ok(cfg_combine(&u, &u, s))? == u, "equal branches are not a fixed point");
        let (s1, s2, lam): (f64, f64, f64) = (r.random_range(0.0..20.0), r.random_range(0.0..20.0), r.random());
        let a = ok(cfg_combine(&u, &c, s1))?;
        let b = ok(cfg_combine(&u, &c, s2))?;
        let mid = ok(cfg_combine(&u, &c, lam * s1 + (1.0 - lam) * s2))?;
        for k in 0..a.data().len() {
            let want = lam * a.data()[k] + (1.0 - lam) * b.data()[k];
            let err = (mid.data()[k] - want).abs() / (1.0 + want.abs());
            worst = worst.max(err);
            ensure!(err <= 1e-12, "affinity in s violated by {err:e}");
        }
    }
    Ok(format!("s=1 and equal-branch identities exact; affinity error {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 5. Stroke blending

fn stroke_blending() -> Outcome {
    let codec = ok(SpaceToDepth::new(4))?;
    let sched = NoiseSchedule::default();
    let image = gradient_image(16, 16, 1);
    let mask = rect_hole(16, 16, 4..12, 4..12);
    let x_in = ok(codec.encode(&ok(image.masked(&mask))?))?;
    let latent_mask = ok(downsample_mask(&mask, 4))?;
    let mut checked = Vec::new();
    for (tau, steps) in [(0.3, 10), (0.55, 50), (0.8, 7), (1.0, 5)] {
        let stroke = ok(StrokeMap::from_rgba(&stroke_layer(16, 16, 4..12, 8..12, [0.1, 0.8, 0.3]), &codec))?;
        let spec = GuidanceSpec { stroke: Some(stroke.clone()), tau: Some(tau), seed: 9, ..GuidanceSpec::default() };
        let valid = ok(validate_spec(&spec, &mask))?;
        let cfg = SamplerConfig { num_steps: steps, ..SamplerConfig::default() };
        let model = Recorder::default();
        let events: Mutex<Vec<(StepEvent, LatentMap)>> = Mutex::new(Vec::new());
        let observer = |e: &StepEvent, x: &LatentMap| events.lock().unwrap().push((*e, x.clone()));
        let finals = ok(sample_latents(&model, &x_in, &latent_mask, &valid, &cfg, &sched, Some(&observer)))?;
        let events = events.into_inner().unwrap();
        let calls = model.take();
        ensure!(calls.len() == events.len(), "expected one prediction per step");
        let ts = ok(tau_step(tau, &sched, steps))?;
        let (x_t, eps_fixed) = output_noise(9, 0, x_in.shape());
        let ab = ok(sched.alpha_bar(ts))?;
        let noised = |c: usize, y: usize, x: usize| ab.sqrt() * stroke.latent.get(c, y, x) + (1.0 - ab).sqrt() * eps_fixed.get(c, y, x);
        let mut injections = 0;

        if ts == sched.steps() {
            // Injection happens on the initial latent, before any step.
            let first_input = &calls[0].2;
            for c in 0..x_in.channels() {
                for y in 0..4 {
                    for x in 0..4 {
                        let want = if stroke.mask.is_known(y, x) { noised(c, y, x) } else { x_t.get(c, y, x) };
                        ensure!(first_input.get(c, y, x).to_bits() == want.to_bits(), "initial injection mismatch");
                    }
                }
            }
            injections += 1;
        }
        for ((event, observed), (t, ids, input)) in events.iter().zip(&calls) {
            ensure!(*t == event.t, "call/step mismatch");
            let eps = Recorder::respond(input, ids);
            let stepped = ok(ddim_step(input, &eps, event.t, event.t_prev, &sched))?;
            let untouched = ok(blend_known(&stepped, &x_in, &latent_mask, event.t_prev, &eps_fixed, &sched))?;
            if event.stroke_blended {
                injections += 1;
                ensure!(event.t_prev == ts, "stroke injected at {} instead of {ts}", event.t_prev);
                for c in 0..x_in.channels() {
                    for y in 0..4 {
                        for x in 0..4 {
                            let want = if stroke.mask.is_known(y, x) { noised(c, y, x) } else { untouched.get(c, y, x) };
                            ensure!(
                                observed.get(c, y, x).to_bits() == want.to_bits(),
                                "tau {tau}: cell ({c},{y},{x}) after injection is {} not {want}",
                                observed.get(c, y, x)
                            );
                        }
                    }
                }
            } else {
                ensure!(*observed == untouched, "tau {tau}: stroke changed the latent at t={}", event.t);
            }
        }
        ensure!(injections == 1, "tau {tau}: {injections} injections");
        ensure!(finals.len() == 1, "one output expected");
        checked.push(format!("tau {tau}->t {ts}"));
    }
    Ok(format!("exact one-shot injection ({})", checked.join(", ")))
}

// ---------------------------------------------------------------------------
// 6. Attention masking

fn attention_masking() -> Outcome {
    let mut r = rng(6);
    let mut unmasked_worst: f64 = 0.0;
    for trial in 0..30 {
        let (h, w) = (r.random_range(1..=4), r.random_range(1..=4));
        let n = h * w;
        let fm = random_mask(&mut r, h, w);
        let (d, dv, text) = (5, 3, r.random_range(1..=6));
        let q = random_tensor(&mut r, n, d);

        let k = random_tensor(&mut r, text, d);
        let v = random_tensor(&mut r, text, dv);
        let cross = ok(attend(&q, &k, &v, Some(&build_cross_mask(&fm, text)), MaskMode::PostSoftmax))?.output;
        for (i, &known) in fm.bits().iter().enumerate() {
            if known {
                ensure!(cross.data()[i * dv..(i + 1) * dv].iter().all(|v| *v == 0.0), "trial {trial}: known row {i} not zero");
            }
        }

        let k = random_tensor(&mut r, n, d);
        let v = random_tensor(&mut r, n, dv);
        let mask = build_self_mask(&fm, SelfMaskRule::KnownQueryUnknownKey);
        let base = ok(attend(&q, &k, &v, Some(&mask), MaskMode::PostSoftmax))?.output;
        let mut zeroed = v.clone();
        for (j, &known) in fm.bits().iter().enumerate() {
            if !known {
                zeroed.data_mut()[j * dv..(j + 1) * dv].iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let again = ok(attend(&q, &k, &zeroed, Some(&mask), MaskMode::PostSoftmax))?.output;
        for (i, &known) in fm.bits().iter().enumerate() {
            if known {
                let (a, b) = (&base.data()[i * dv..(i + 1) * dv], &again.data()[i * dv..(i + 1) * dv]);
                ensure!(
                    a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
                    "trial {trial}: known query {i} depends on unknown values"
                );
            }
        }

        let plain = ok(attention(&q, &k, &v))?;
        let ones = ok(attend(&q, &k, &v, Some(&AttentionMask::ones(n, n)), MaskMode::PostSoftmax))?.output;
        let diff = plain.max_abs_diff(&ones);
        unmasked_worst = unmasked_worst.max(diff);
        ensure!(diff <= 1e-12, "all-ones mask differs from unmasked attention by {diff:e}");
    }

    // Brute-force predicate enumeration over every mask up to 4x4.
    let mut masks = 0u64;
    for h in 1..=4 {
        for w in 1..=4 {
            let n = h * w;
            for bits in 0u32..(1 << n) {
                let known: Vec<bool> = (0..n).map(|i| bits >> i & 1 == 1).collect();
                let fm = ok(RegionMask::from_bits(h, w, known.clone()))?;
                for text in [1, 3] {
                    let cm = build_cross_mask(&fm, text);
                    ensure!(cm.rows() == n && cm.cols() == text, "cross mask shape");
                    for i in 0..n {
                        for j in 0..text {
                            ensure!(cm.get(i, j) == !known[i], "cross mask {h}x{w}/{bits:b} at ({i},{j})");
                        }
                    }
                }
                let kq = build_self_mask(&fm, SelfMaskRule::KnownQueryUnknownKey);
                let uq = build_self_mask(&fm, SelfMaskRule::UnknownQueryKnownKey);
                for i in 0..n {
                    for j in 0..n {
                        ensure!(kq.get(i, j) == !(known[i] && !known[j]), "self mask {h}x{w}/{bits:b} at ({i},{j})");
                        ensure!(uq.get(i, j) == !(!known[i] && known[j]), "reverse self mask {h}x{w}/{bits:b}");
                    }
                }
                masks += 1;
            }
        }
    }
    Ok(format!("row invariants exact; ones-mask error {unmasked_worst:.1e}; {masks} masks enumerated"))
}

// ---------------------------------------------------------------------------
// 7. Subject token retrieval

fn retrieval() -> Outcome {
    let mut r = rng(7);
    let ids: Vec<u32> = (2..1002).collect();
    for seed in 0..100 {
        let embedder = ok(ToyJointEmbedder::new(seed, 16, 4))?;
        let table = ok(TokenTable::precompute(&embedder, ids.clone()))?;
        let image = ok(ImageBuffer::from_fn(8, 8, 3, |_, _, _| r.random::<f32>()))?;
        let query = ok(embedder.embed_image(&image))?;
        let mut best: Option<(f64, u32)> = None;
        for &id in &ids {
            let score: f64 = embedder.embed_token(id).iter().zip(&query).map(|(a, b)| a * b).sum();
            if best.is_none_or(|(s, _)| score > s) {
                best = Some((score, id));
            }
        }
        let want = best.unwrap().1;
        let got = ok(table.argmax(&query))?;
        ensure!(got == want, "embedder {seed}: retrieved {got}, exhaustive search {want}");
        for scale in [1e-3, 0.5, 7.0, 1e6] {
            let scaled: Vec<f64> = query.iter().map(|v| v * scale).collect();
            ensure!(ok(table.argmax(&scaled))? == want, "embedder {seed}: scale {scale} changes the token");
        }
    }
    Ok("100 embedders x 1000 tokens match exhaustive search; invariant under 4 positive scales".into())
}

// ---------------------------------------------------------------------------
// 8. Overfit check

/// Learning rate for this check. At the 1e-5 default the toy network moves
/// too little in 200 steps; 1e-4 was chosen from reference runs
/// (ratios 0.93 at 1e-5, 0.10 at 1e-4, 0.04 at 1e-3) before freezing.
const OVERFIT_LR: f64 = 1e-4;
const OVERFIT_RATIO: f64 = 0.5;

fn overfit() -> Outcome {
    let codec = ok(SpaceToDepth::new(8))?;
    let image = ok(ImageBuffer::from_fn(64, 64, 3, |y, x, c| {
        let v = ((y as f32 / 63.0) * 0.6 + (x as f32 / 63.0) * 0.3 + c as f32 * 0.05) % 1.0;
        if (y / 16 + x / 16) % 2 == 0 {
            v
        } else {
            1.0 - v
        }
    }))?;
    let mask = RegionMask::from_fn(64, 64, |y, x| !(16..40).contains(&y) || !(24..48).contains(&x));
    let x_in = ok(codec.encode(&ok(image.masked(&mask))?))?;
    let m = ok(downsample_mask(&mask, 8))?;
    let mut params = ok(ParameterSet::init(BackboneConfig::preset(Preset::Small, 192), 0))?;
    let cfg = FinetuneConfig { total_iters: 200, learning_rate: OVERFIT_LR, ..FinetuneConfig::default() };
    let start = Instant::now();
    let history = ok(run_finetune(&mut params, &x_in, &m, None, &cfg, &NoiseSchedule::default(), None))?;
    let elapsed = start.elapsed();
    let bg: Vec<f64> = history.iter().map(|r| r.bg).collect();
    let s = smoothed(&bg, 20);
    let (first, last) = (s[19], s[s.len() - 1]);
    let ratio = last / first;
    ensure!(ratio < OVERFIT_RATIO, "smoothed loss ratio {ratio:.3} (from {first:.4} to {last:.4})");
    ensure!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    Ok(format!("smoothed bg loss {first:.4} -> {last:.4} (ratio {ratio:.3}) in {:.1}s", elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------------------
// 9. Conditioning schedule and call counts

fn scheduling() -> Outcome {
    let codec = ok(SpaceToDepth::new(4))?;
    let sched = NoiseSchedule::default();
    let image = gradient_image(16, 16, 2);
    let mask = rect_hole(16, 16, 4..12, 4..12);
    let x_in = ok(codec.encode(&ok(image.masked(&mask))?))?;
    let latent_mask = ok(downsample_mask(&mask, 4))?;
    let null = TokenSequence::null().ids().to_vec();
    let stroke = || StrokeMap::from_rgba(&stroke_layer(16, 16, 4..8, 4..12, [0.5, 0.5, 0.9]), &codec).unwrap();
    let steps = 50;
    let cfg = SamplerConfig { num_steps: steps, ..SamplerConfig::default() };
    let mut summary = Vec::new();
    for (label, spec, per_step) in [
        ("unconditional", GuidanceSpec::unconditional(0), Some(1)),
        ("stroke", GuidanceSpec { stroke: Some(stroke()), ..GuidanceSpec::default() }, Some(1)),
        ("text", GuidanceSpec { prompt: Some("a blue bird".into()), ..GuidanceSpec::default() }, Some(2)),
        (
            "mixed",
            GuidanceSpec { prompt: Some("a blue bird".into()), stroke: Some(stroke()), tau: Some(0.55), ..GuidanceSpec::default() },
            None,
        ),
    ] {
        let valid = ok(validate_spec(&spec, &mask))?;
        let model = Recorder::default();
        let composed = valid.condition.ids().to_vec();
        ok(sample_latents(&model, &x_in, &latent_mask, &valid, &cfg, &sched, None))?;
        let calls = model.take();
        let grid: Vec<usize> = ok(sched.strided_pairs(steps))?.iter().map(|p| p.0).collect();
        let ts = valid.tau.map(|tau| tau_step(tau, &sched, steps).unwrap());
        for &t in &grid {
            let at: Vec<&Vec<u32>> = calls.iter().filter(|c| c.0 == t).map(|c| &c.1).collect();
            let want = match per_step {
                Some(n) => n,
                None if ts.is_some_and(|ts| t > ts) => 1,
                None => 2,
            };
            ensure!(at.len() == want, "{label}: {} predictions at t={t}, expected {want}", at.len());
            ensure!(at[0] == &null, "{label}: first prediction at t={t} is not null-conditioned");
            if want == 2 {
                ensure!(at[1] == &composed, "{label}: composed condition missing at t={t}");
            }
        }
        summary.push(format!("{label} {} calls", calls.len()));
        if label == "mixed" {
            let ts = ts.unwrap();
            let after = grid.iter().filter(|&&t| t <= ts).count();
            ensure!(calls.len() == steps + after, "mixed: {} calls", calls.len());
            summary.push(format!("null above t={ts}"));
        }
    }
    Ok(summary.join(", "))
}

// ---------------------------------------------------------------------------
// Command-line and service helpers

fn cli(args: &[&str]) -> Result<Value, String> {
    let out = ok(Command::new(env!("CARGO_BIN_EXE_inpaint")).args(args).output())?;
    ensure!(
        out.status.success(),
        "inpaint {:?} exited {:?}: {}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    ok(serde_json::from_slice(&out.stdout))
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn read(p: impl AsRef<Path>) -> Result<Vec<u8>, String> {
    std::fs::read(p.as_ref()).map_err(|e| format!("{}: {e}", p.as_ref().display()))
}

struct Files {
    image: PathBuf,
    mask: PathBuf,
    exemplar: PathBuf,
    stroke: PathBuf,
}

fn write_files(dir: &Path, size: usize) -> Result<Files, String> {
    let files = Files {
        image: dir.join("image.png"),
        mask: dir.join("mask.png"),
        exemplar: dir.join("exemplar.png"),
        stroke: dir.join("stroke.png"),
    };
    let q = size / 4;
    ok(save_png(&gradient_image(size, size, 4), &files.image))?;
    ok(save_mask_png(&rect_hole(size, size, q..3 * q, q..3 * q), &files.mask))?;
    ok(save_png(&ok(ImageBuffer::from_fn(8, 8, 3, |y, x, c| ((y + 2 * x + c) % 5) as f32 / 4.0))?, &files.exemplar))?;
    ok(save_png(&stroke_layer(size, size, q + 1..2 * q, q + 1..2 * q, [0.8, 0.2, 0.2]), &files.stroke))?;
    Ok(files)
}

async fn wait_for(client: &reqwest::Client, url: &str, done: impl Fn(&Value) -> bool) -> Result<Value, String> {
    for _ in 0..1200 {
        let v: Value = ok(ok(client.get(url).send().await)?.json().await)?;
        if done(&v) {
            return Ok(v);
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    Err(format!("timed out waiting on {url}"))
}

// ---------------------------------------------------------------------------
// 10. CLI / service determinism

fn determinism() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    let f = write_files(dir.path(), 16)?;
    let ckpt = dir.path().join("cli.ckpt");
    let ft = cli(&[
        "finetune", "--image", &s(&f.image), "--mask", &s(&f.mask), "--exemplar", &s(&f.exemplar), "--preset", "tiny",
        "--codec-factor", "4", "--iters", "5", "--out", &s(&ckpt), "--quiet",
    ])?;
    let token = ft["subject_token"].as_u64().ok_or("finetune reported no subject token")?.to_string();
    let run = |seed: &str, out: &str| {
        cli(&[
            "inpaint", "--checkpoint", &s(&ckpt), "--image", &s(&f.image), "--mask", &s(&f.mask), "--text", "a red hat",
            "--exemplar-token", &token, "--stroke", &s(&f.stroke), "--tau", "0.5", "--steps", "6", "--seed", seed, "--n",
            "2", "--outdir", &s(&dir.path().join(out)),
        ])
    };
    let a = run("7", "seed7")?;
    ensure!(a["mode"] == "mixed", "unexpected mode {}", a["mode"]);
    let b = run("8", "seed8")?;
    let cli_outputs: Vec<Vec<u8>> = (0..2).map(|i| read(dir.path().join(format!("seed7/output_{i}.png")))).collect::<Result<_, _>>()?;
    let other_seed = read(dir.path().join("seed8/output_0.png"))?;
    let _ = b;

    let rt = ok(tokio::runtime::Runtime::new())?;
    let (service_ckpt, service_outputs) = rt.block_on(async {
        let config = inpaint_service::ServiceConfig {
            artifact_root: dir.path().join("artifacts"),
            preset: Preset::Tiny,
            codec_factor: 4,
            ..inpaint_service::ServiceConfig::default()
        };
        let state = ok(inpaint_service::AppState::open(config))?;
        let listener = ok(tokio::net::TcpListener::bind("127.0.0.1:0").await)?;
        let base = format!("http://{}", ok(listener.local_addr())?);
        let server = tokio::spawn(inpaint_service::serve(listener, state));
        let client = reqwest::Client::new();
        let form = reqwest::multipart::Form::new()
            .part("image", reqwest::multipart::Part::bytes(read(&f.image)?))
            .part("mask", reqwest::multipart::Part::bytes(read(&f.mask)?))
            .part("exemplar", reqwest::multipart::Part::bytes(read(&f.exemplar)?));
        let created: Value = ok(ok(client.post(format!("{base}/sessions")).multipart(form).send().await)?.json().await)?;
        let id = created["id"].as_str().ok_or_else(|| format!("session not created: {created}"))?.to_string();
        ensure!(created["subject_token"].as_u64().map(|t| t.to_string()) == Some(token.clone()), "service token {} vs CLI {token}", created["subject_token"]);
        ok(client.post(format!("{base}/sessions/{id}/finetune")).json(&json!({"total_iters": 5})).send().await)?;
        let session = wait_for(&client, &format!("{base}/sessions/{id}"), |v| v["finetune"]["status"] != "running").await?;
        ensure!(session["finetune"]["status"] == "done", "service finetune: {session}");
        let ckpt = ok(ok(client.get(format!("{base}/sessions/{id}/checkpoint")).send().await)?.bytes().await)?.to_vec();
        let job: Value = ok(ok(client
            .post(format!("{base}/sessions/{id}/jobs"))
            .json(&json!({
                "prompt": "a red hat",
                "use_exemplar": true,
                "stroke_png": base64::engine::general_purpose::STANDARD.encode(read(&f.stroke)?),
                "tau": 0.5,
                "steps": 6,
                "seed": 7,
                "num_outputs": 2
            }))
            .send()
            .await)?
        .json()
        .await)?;
        let job_id = job["id"].as_str().ok_or_else(|| format!("job rejected: {job}"))?.to_string();
        let done = wait_for(&client, &format!("{base}/jobs/{job_id}"), |v| v["status"] == "done" || v["status"] == "failed").await?;
        ensure!(done["status"] == "done", "service job: {done}");
        let mut outs = Vec::new();
        for i in 0..2 {
            outs.push(ok(ok(client.get(format!("{base}/jobs/{job_id}/artifacts/{i}")).send().await)?.bytes().await)?.to_vec());
        }
        server.abort();
        Ok::<_, String>((ckpt, outs))
    })?;

    ensure!(service_ckpt == read(&ckpt)?, "service and CLI checkpoints differ");
    ensure!(service_outputs == cli_outputs, "service and CLI images differ");

    // Distinct seeds (and distinct outputs of one job) differ inside the hole.
    let mask = rect_hole(16, 16, 4..12, 4..12);
    let hole_differs = |a: &[u8], b: &[u8]| -> Result<bool, String> {
        let (a, b) = (ok(decode_rgb(a))?, ok(decode_rgb(b))?);
        Ok((0..16).any(|y| (0..16).any(|x| !mask.is_known(y, x) && (0..3).any(|c| a.get(y, x, c) != b.get(y, x, c)))))
    };
    ensure!(hole_differs(&cli_outputs[0], &other_seed)?, "seeds 7 and 8 give the same hole content");
    ensure!(hole_differs(&cli_outputs[0], &cli_outputs[1])?, "outputs of one job share hole content");
    Ok("checkpoint and 2 mixed-mode images byte-identical across CLI and service; distinct seeds differ".into())
}

// ---------------------------------------------------------------------------
// 11. Defaults fidelity

fn defaults_fidelity() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    let f = write_files(dir.path(), 32)?;
    let ckpt = dir.path().join("bare.ckpt");
    let ft = cli(&["finetune", "--image", &s(&f.image), "--mask", &s(&f.mask), "--out", &s(&ckpt), "--quiet"])?;
    ensure!(ft["iterations"] == 100, "finetune ran {} iterations", ft["iterations"]);
    ensure!(ft["learning_rate"].as_f64() == Some(1e-5), "learning rate {}", ft["learning_rate"]);
    ensure!(ft["preset"] == "small", "preset {}", ft["preset"]);
    let losses = ok(std::fs::read_to_string(ft["losses"].as_str().unwrap_or_default()))?;
    ensure!(losses.lines().count() == 101, "loss log has {} rows", losses.lines().count() - 1);
    ensure!(ok(load_checkpoint(&ckpt))?.finetune_iters == 100, "checkpoint iteration count");

    let out = dir.path().join("out");
    let inp = cli(&["inpaint", "--checkpoint", &s(&ckpt), "--image", &s(&f.image), "--mask", &s(&f.mask), "--outdir", &s(&out)])?;
    ensure!(inp["steps"] == 50 && inp["steps_executed"] == 50, "sampler ran {} steps", inp["steps_executed"]);
    ensure!(inp["scale"].as_f64() == Some(8.0), "guidance scale {}", inp["scale"]);
    ensure!(inp["n"] == 1 && inp["mode"] == "unconditional", "bare inpaint manifest {inp}");
    ensure!(ok(load_rgb(&out.join("output_0.png")))?.width() == 32, "output image missing");

    let text = cli(&[
        "inpaint", "--checkpoint", &s(&ckpt), "--image", &s(&f.image), "--mask", &s(&f.mask), "--text", "a cat",
        "--outdir", &s(&dir.path().join("text")),
    ])?;
    ensure!(text["cfg_steps"] == 50 && text["scale"].as_f64() == Some(8.0), "text defaults {text}");
    Ok("100 iterations at lr 1e-5, 50 DDIM steps, scale 8".into())
}

// ---------------------------------------------------------------------------
// 12. Stroke RMSE golden values

fn rmse_golden() -> Outcome {
    let stroke = stroke_layer(4, 4, 1..3, 1..3, [0.2, 0.4, 0.6]);
    let exact = ok(ImageBuffer::from_fn(4, 4, 3, |y, x, c| stroke.get(y, x, c)))?;
    let v = ok(stroke_rmse(&exact, &stroke))?;
    ensure!(v == 0.0, "exact match gives {v}");
    let offset = ok(ImageBuffer::from_fn(4, 4, 3, |y, x, c| {
        if (1..3).contains(&y) && (1..3).contains(&x) {
            [0.3, 0.5, 0.7][c]
        } else {
            0.0
        }
    }))?;
    let v = ok(stroke_rmse(&offset, &stroke))?;
    ensure!((v - 0.1).abs() <= 1e-7, "constant offset gives {v}");
    let two = ok(ImageBuffer::from_fn(1, 2, 4, |_, x, c| if c == 3 { 1.0 } else { [0.1, 0.2][x] }))?;
    let out = ok(ImageBuffer::from_fn(1, 2, 3, |_, x, _| [0.4, 0.6][x]))?;
    let v = ok(stroke_rmse(&out, &two))?;
    ensure!((v - 0.3535534).abs() <= 1e-7, "two-pixel case gives {v}");
    Ok(format!("0, 0.1 and {v:.7}"))
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("known-region exactness", known_region_exactness),
        ("ddim golden vectors", ddim_golden),
        ("loss identities", loss_identities),
        ("cfg identities", cfg_identities),
        ("stroke blending", stroke_blending),
        ("attention masking", attention_masking),
        ("subject retrieval", retrieval),
        ("overfit check", overfit),
        ("conditioning schedule", scheduling),
        ("cli/service determinism", determinism),
        ("defaults fidelity", defaults_fidelity),
        ("stroke rmse golden values", rmse_golden),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} ({secs:.1}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} ({secs:.1}s)", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
