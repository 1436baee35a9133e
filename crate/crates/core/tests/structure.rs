//! Loss bounds and identities, and the structural guarantees of the region
//! embedding and the fusion module.

use cor_core::avti::Avti;
use cor_core::losses::{loss_bg, loss_cor, loss_fg, ContrastiveInput, EmptyMaskPolicy};
use cor_core::numerics::layers::zero_params;
use cor_core::numerics::{Graph, ParamStore, Tensor};
use cor_core::rre::{Rre, RreConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: usize = 4;
const W: usize = 4;
const D: usize = 8;

struct Sample {
    features: Tensor,
    gt: Vec<f64>,
    prompt: Tensor,
}

fn random_sample(rng: &mut ChaCha8Rng) -> Sample {
    let features = Tensor::from_fn(&[H, W, D], |_| rng.random_range(-1.0..1.0));
    let mut gt: Vec<f64> = (0..H * W).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
    // At least one cell on each side.
    gt[0] = 1.0;
    gt[H * W - 1] = 0.0;
    let prompt = Tensor::from_fn(&[D], |_| rng.random_range(-1.0..1.0));
    Sample { features, gt, prompt }
}

/// Returns (L_fg, L_bg, L_cor) with the prompt scaled by `lambda`.
fn losses(batch: &[Sample], lambda: f64) -> (f64, f64, f64) {
    let mut g = Graph::new();
    let mut inputs = Vec::new();
    for s in batch {
        let features = g.input(s.features.clone()).unwrap();
        let p = Tensor::from_fn(&[D], |i| lambda * s.prompt.data()[i]);
        let prompt = g.input(p).unwrap();
        inputs.push(ContrastiveInput { features, gt_grid: &s.gt, prompt });
    }
    let (fg, bg, cor) = loss_cor(&mut g, &inputs, EmptyMaskPolicy::Error).unwrap();
    let v = |x| g.value(x).data()[0];
    (v(fg), v(bg), v(cor))
}

/// Foreground average of the features, computed directly.
fn pooled_fg(s: &Sample) -> Tensor {
    let mut out = vec![0.0; D];
    let total: f64 = s.gt.iter().sum();
    for p in 0..H * W {
        for (o, f) in out.iter_mut().zip(&s.features.data()[p * D..(p + 1) * D]) {
            *o += s.gt[p] * f / total;
        }
    }
    Tensor::new(&[D], out).unwrap()
}

#[test]
fn thousand_batches_respect_bounds_and_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let n = rng.random_range(1..=4);
        let batch: Vec<Sample> = (0..n).map(|_| random_sample(&mut rng)).collect();
        let (fg, bg, cor) = losses(&batch, 1.0);
        for v in [fg, bg] {
            assert!((-1e-9..=2.0 + 1e-9).contains(&v), "{v}");
        }
        assert_eq!(cor, fg + bg);

        let lambda = rng.random_range(0.01..100.0);
        let (fg2, bg2, _) = losses(&batch, lambda);
        assert!((fg - fg2).abs() < 1e-9 && (bg - bg2).abs() < 1e-9);
    }
}

#[test]
fn foreground_loss_vanishes_when_the_prompt_is_the_pooled_foreground() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let mut batch: Vec<Sample> = (0..3).map(|_| random_sample(&mut rng)).collect();
        for s in batch.iter_mut() {
            s.prompt = pooled_fg(s);
        }
        let (fg, _, _) = losses(&batch, 1.0);
        assert!(fg.abs() < 1e-12, "{fg}");
    }
}

#[test]
fn single_terms_match_the_pair() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let s = random_sample(&mut rng);
    let mut g = Graph::new();
    let features = g.input(s.features.clone()).unwrap();
    let prompt = g.input(s.prompt.clone()).unwrap();
    let batch = [ContrastiveInput { features, gt_grid: &s.gt, prompt }];
    let fg = loss_fg(&mut g, &batch, EmptyMaskPolicy::Error).unwrap();
    let bg = loss_bg(&mut g, &batch, EmptyMaskPolicy::Error).unwrap();
    let (fg2, bg2, _) = losses(std::slice::from_ref(&s), 1.0);
    assert_eq!(g.value(fg).data()[0], fg2);
    assert_eq!(g.value(bg).data()[0], bg2);
}

fn rre(seed: u64) -> (ParamStore, Rre) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Rre::new(&mut store, RreConfig { k: 4, channels: D }, false, &mut rng).unwrap();
    (store, r)
}

#[test]
fn activation_maps_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for seed in 0..50 {
        let (store, r) = rre(seed);
        let f_ref = Tensor::from_fn(&[H, W, D], |_| rng.random_range(-2.0..2.0));
        let f_mask = Tensor::from_fn(&[H, W, D], |_| rng.random_range(-2.0..2.0));
        let (_, a_bar, _) = r.evaluate(&store, &f_ref, &f_mask).unwrap();
        for k in 0..4 {
            let sum: f64 = (0..H * W).map(|p| a_bar.data()[p * 4 + k]).sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!((0..H * W).all(|p| a_bar.data()[p * 4 + k] >= 0.0));
        }
    }
}

#[test]
fn constant_reference_features_pass_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for seed in 0..50 {
        let (store, r) = rre(100 + seed);
        let v: Vec<f64> = (0..D).map(|_| rng.random_range(-3.0..3.0)).collect();
        let f_ref = Tensor::from_fn(&[H, W, D], |i| v[i % D]);
        let f_mask = Tensor::from_fn(&[H, W, D], |_| rng.random_range(-2.0..2.0));
        let (_, _, out) = r.evaluate(&store, &f_ref, &f_mask).unwrap();
        for (o, want) in out.data().iter().zip(&v) {
            assert!((o - want).abs() < 1e-6);
        }
    }
}

fn avti(seed: u64, zero: bool) -> (ParamStore, Avti) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Avti::new(&mut store, D, false, &mut rng);
    if zero {
        zero_params(&mut store, &a.params());
    }
    (store, a)
}

fn norm(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn zero_initialised_fusion_is_a_quarter_sum() {
    let (store, a) = avti(1, true);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..100 {
        let r = Tensor::from_fn(&[D], |_| rng.random_range(-5.0..5.0));
        let t = Tensor::from_fn(&[D], |_| rng.random_range(-5.0..5.0));
        let out = a.evaluate(&store, &r, &t).unwrap();
        assert_eq!(out.alpha, 0.5);
        for c in 0..D {
            assert_eq!(out.f_avti.data()[c], 0.25 * (r.data()[c] + t.data()[c]));
        }
    }
}

#[test]
fn fused_norm_is_bounded_by_the_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for i in 0..1000 {
        let (store, a) = avti(1000 + i, false);
        let scale = rng.random_range(0.1..10.0);
        let r = Tensor::from_fn(&[D], |_| scale * rng.random_range(-1.0..1.0));
        let t = Tensor::from_fn(&[D], |_| rng.random_range(-1.0..1.0));
        let out = a.evaluate(&store, &r, &t).unwrap();
        assert!((0.0..=1.0).contains(&out.alpha));
        let bound = norm(&r).max(norm(&t));
        assert!(norm(&out.f_avti) <= bound + 1e-12, "draw {i}");
        let gated_bound = out.alpha * norm(&r) + (1.0 - out.alpha) * norm(&t);
        assert!(norm(&out.f_avti) <= gated_bound + 1e-12);
    }
}
