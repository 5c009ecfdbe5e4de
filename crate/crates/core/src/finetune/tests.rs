use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::backbone::{BackboneConfig, Preset};

const C: usize = 12;
const H: usize = 8;

fn tiny() -> (Backbone, ParameterSet) {
    let cfg = BackboneConfig::preset(Preset::Tiny, C);
    (Backbone::new(cfg).unwrap(), ParameterSet::init(cfg, 9).unwrap())
}

fn latent(seed: u64) -> LatentMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    normal_latent([C, H, H], &mut rng)
}

fn hole_mask() -> RegionMask {
    RegionMask::from_fn(H, H, |y, x| !((2..6).contains(&y) && (3..7).contains(&x)))
}

fn bundle() -> ExemplarBundle {
    let x_ref = LatentMap::new(C, 4, 4, (0..C * 16).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap();
    let bbox = hole_mask().hole_bbox().unwrap();
    ExemplarBundle::new(x_ref, 777, bbox, [C, H, H]).unwrap()
}

#[test]
fn defaults() {
    let c = FinetuneConfig::default();
    assert_eq!((c.total_iters, c.learning_rate), (100, 1e-5));
    assert_eq!((c.beta1, c.beta2, c.epsilon), (0.9, 0.999, 1e-8));
    assert!(FinetuneConfig { learning_rate: 0.0, ..c }.validate().is_err());
}

#[test]
fn masked_mse_edge_cases() {
    let (eps, pred) = (latent(1), latent(2));
    let none = masked_mse(&eps, &pred, &RegionMask::filled(H, H, false)).unwrap();
    assert_eq!(none.loss, 0.0);
    assert!(none.grad.data().iter().all(|&g| g == 0.0));
    let all = masked_mse(&eps, &pred, &RegionMask::filled(H, H, true)).unwrap();
    assert_eq!(all.loss.to_bits(), ddpm_loss(&eps, &pred).unwrap().to_bits());
    assert_eq!(masked_mse(&eps, &eps, &hole_mask()).unwrap().loss, 0.0);
    assert!(masked_mse(&eps, &LatentMap::zeros(C, H, 4), &hole_mask()).is_err());
}

#[test]
fn masked_gradient_matches_finite_differences() {
    let (eps, pred) = (latent(3), latent(4));
    let m = hole_mask();
    let g = masked_mse(&eps, &pred, &m).unwrap().grad;
    let plane = H * H;
    for k in (0..C * plane).step_by(7) {
        let cell = k % plane;
        if !m.bits()[cell] {
            assert_eq!(g.data()[k].to_bits(), 0.0f64.to_bits());
            continue;
        }
        let h = 1e-6;
        let bump = |d: f64| {
            let mut p = pred.clone();
            p.data_mut()[k] += d;
            masked_mse(&eps, &p, &m).unwrap().loss
        };
        let fd = (bump(h) - bump(-h)) / (2.0 * h);
        let an = g.data()[k];
        assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-8), "k={k}: fd {fd} vs {an}");
    }
}

#[test]
fn bg_loss_identities() {
    let (bb, p) = tiny();
    let sched = NoiseSchedule::default();
    let (x_in, eps) = (latent(5), latent(6));
    assert_eq!(bg_loss(&bb, &p, &x_in, &RegionMask::filled(H, H, false), 400, &eps, &sched).unwrap(), 0.0);
    let full = bg_loss(&bb, &p, &x_in, &RegionMask::filled(H, H, true), 400, &eps, &sched).unwrap();
    let x_t = add_noise(&x_in, 400, &eps, &sched).unwrap();
    let pred = bb
        .predict_noise(&p, &x_t, TextInput::Tokens(&TokenSequence::null()), 400, None)
        .unwrap();
    assert_eq!(full.to_bits(), ddpm_loss(&eps, &pred).unwrap().to_bits());
}

#[test]
fn placement_examples() {
    let x_ref = LatentMap::new(C, 8, 8, (0..C * 64).map(|i| i as f64).collect()).unwrap();
    let bbox = Rect {
        y: 4,
        x: 2,
        height: 8,
        width: 8,
    };
    let (full, valid) = place_exemplar(&x_ref, bbox, 1.0, (0, 0), [C, 16, 16]).unwrap();
    assert_eq!(valid, RegionMask::from_fn(16, 16, |y, x| bbox.contains(y, x)));
    for c in 0..C {
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(full.get(c, y + 4, x + 2), x_ref.get(c, y, x));
            }
        }
    }
    let (_, half) = place_exemplar(&x_ref, bbox, 0.5, (1, 3), [C, 16, 16]).unwrap();
    assert_eq!(half.known_count(), 16);
    assert!(half.is_known(5, 5) && half.is_known(8, 8) && !half.is_known(9, 8));
    assert!(place_exemplar(&x_ref, bbox, 0.5, (5, 0), [C, 16, 16]).is_err());
    let empty = Rect { height: 0, ..bbox };
    assert!(augment_exemplar(&x_ref, empty, [C, 16, 16], &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn augmentation_stays_in_bbox() {
    let x_ref = LatentMap::filled(C, 6, 3, 1.0);
    let bbox = Rect {
        y: 1,
        x: 2,
        height: 5,
        width: 6,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inside = RegionMask::from_fn(H, H, |y, x| bbox.contains(y, x));
    for _ in 0..300 {
        let (x_aug, valid) = augment_exemplar(&x_ref, bbox, [C, H, H], &mut rng).unwrap();
        assert!(valid.known_count() > 0);
        assert!(valid.is_subset_of(&inside));
        for y in 0..H {
            for x in 0..H {
                assert_eq!(x_aug.get(0, y, x), if valid.is_known(y, x) { 1.0 } else { 0.0 });
            }
        }
    }
}

#[test]
fn ref_loss_is_reproducible() {
    let (bb, p) = tiny();
    let sched = NoiseSchedule::default();
    let eps = latent(8);
    let run = || ref_loss(&bb, &p, &bundle(), 250, &eps, &sched, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let a = run();
    assert!(a > 0.0);
    assert_eq!(a.to_bits(), run().to_bits());
    assert_eq!(bundle().condition().ids(), &[BOS, 777, EOS]);
}

#[test]
fn zero_iterations_leave_params_alone() {
    let (_, mut p) = tiny();
    let before = p.clone();
    let cfg = FinetuneConfig {
        total_iters: 0,
        ..FinetuneConfig::default()
    };
    let h = run_finetune(&mut p, &latent(1), &hole_mask(), Some(&bundle()), &cfg, &NoiseSchedule::default(), None).unwrap();
    assert!(h.is_empty());
    assert_eq!(p, before);
}

#[test]
fn finetune_is_deterministic_and_additive() {
    let cfg = FinetuneConfig {
        total_iters: 4,
        learning_rate: 1e-3,
        seed: 17,
        ..FinetuneConfig::default()
    };
    let run = |b: Option<&ExemplarBundle>| {
        let (_, mut p) = tiny();
        let mut seen = 0;
        let mut cb = |_: &LossRecord| seen += 1;
        let h = run_finetune(&mut p, &latent(1), &hole_mask(), b, &cfg, &NoiseSchedule::default(), Some(&mut cb)).unwrap();
        assert_eq!(seen, 4);
        (p, h)
    };
    let (p1, h1) = run(Some(&bundle()));
    let (p2, h2) = run(Some(&bundle()));
    assert_eq!(p1, p2);
    assert_eq!(p1.finetune_iters, 4);
    for (a, b) in h1.iter().zip(&h2) {
        assert_eq!((a.bg, a.reference, a.total), (b.bg, b.reference, b.total));
        assert_eq!(a.total, a.bg + a.reference.unwrap());
    }
    assert_ne!(p1, tiny().1);
    let (p3, h3) = run(None);
    assert!(h3.iter().all(|r| r.reference.is_none() && r.total == r.bg));
    assert_ne!(p3, p1);
}

#[test]
fn disabling_exemplar_skips_reference_loss() {
    let (_, mut p) = tiny();
    let cfg = FinetuneConfig {
        total_iters: 2,
        use_exemplar: false,
        ..FinetuneConfig::default()
    };
    let h = run_finetune(&mut p, &latent(1), &hole_mask(), Some(&bundle()), &cfg, &NoiseSchedule::default(), None).unwrap();
    assert!(h.iter().all(|r| r.reference.is_none()));
}

#[test]
fn smoothed_loss_trends_down() {
    let cfg = BackboneConfig::preset(Preset::Tiny, C);
    let mut p = ParameterSet::init(cfg, 0).unwrap();
    let x_in = LatentMap::new(C, H, H, (0..C * H * H).map(|i| ((i % 29) as f64 / 14.0) - 1.0).collect()).unwrap();
    let ft = FinetuneConfig {
        total_iters: 100,
        ..FinetuneConfig::default()
    };
    let h = run_finetune(&mut p, &x_in, &hole_mask(), None, &ft, &NoiseSchedule::default(), None).unwrap();
    let s = smoothed(&h.iter().map(|r| r.bg).collect::<Vec<_>>(), 20);
    let mut best = s[19];
    for (i, &v) in s.iter().enumerate().skip(20) {
        assert!(v <= best * 1.05, "iteration {i}: {v} vs running min {best}");
        best = best.min(v);
    }
    assert!(s[99] <= s[19]);
}

#[test]
fn smoothing_window() {
    assert_eq!(smoothed(&[2.0, 4.0, 6.0, 8.0], 2), vec![2.0, 3.0, 5.0, 7.0]);
    assert_eq!(smoothed(&[1.0], 20), vec![1.0]);
}
