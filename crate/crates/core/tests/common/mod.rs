//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tafs::adapt::{loss_nce, loss_proto, loss_stat, masked_prototypes};
use tafs::harness::RunConfig;
use tafs::metrics::Counts;
use tafs::{Grid, Mask, ScoreMap};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
}

pub fn random_mask(w: usize, h: usize, p: f64, rng: &mut impl Rng) -> Mask {
    Grid::from_fn(w, h, |_, _| rng.gen_bool(p))
}

/// Toy backbone at native resolution.
pub fn toy_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.set("backbone", "toy").unwrap();
    cfg.set("input_size", "native").unwrap();
    cfg
}

/// Pixel loop over the four confusion counters.
pub fn counts_oracle(pred: &Mask, gt: &Mask) -> Counts {
    let mut c = Counts::default();
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            match (*pred.get(x, y), *gt.get(x, y)) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }
    c
}

/// Attention-weighted mask aggregation written as explicit loops.
pub fn correlation_oracle(q: &Array2<f64>, k: &Array2<f64>, v: &[f64]) -> Vec<f64> {
    let d = q.ncols();
    let mut out = Vec::with_capacity(q.nrows());
    for i in 0..q.nrows() {
        let mut logits = vec![0.0; k.nrows()];
        for j in 0..k.nrows() {
            let mut dot = 0.0;
            for c in 0..d {
                dot += q[[i, c]] * k[[j, c]];
            }
            logits[j] = dot / (d as f64).sqrt();
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        out.push(weights.iter().zip(v).map(|(w, v)| w * v).sum::<f64>() / total);
    }
    out
}

/// Score maps drawn from a random Gaussian mixture, clamped to `[0, 1]`.
pub fn mixture_map(w: usize, h: usize, rng: &mut impl Rng) -> ScoreMap {
    let parts = rng.gen_range(1..=4);
    let comps: Vec<(f64, f64, f64)> = (0..parts)
        .map(|_| (rng.gen_range(0.0..1.0), rng.gen_range(0.01..0.2), rng.gen_range(0.1..1.0)))
        .collect();
    let total: f64 = comps.iter().map(|c| c.2).sum();
    Grid::from_fn(w, h, |_, _| {
        let mut u = rng.gen_range(0.0..total);
        let mut pick = comps[0];
        for c in &comps {
            if u < c.2 {
                pick = *c;
                break;
            }
            u -= c.2;
        }
        Normal::new(pick.0, pick.1).unwrap().sample(rng).clamp(0.0, 1.0)
    })
}

/// Exhaustive between-class variance sweep over the 255 interior bin edges
/// of a 256-bin histogram. Returns every edge index whose variance is within
/// `rel` of the maximum, or `None` for a single occupied bin.
pub fn otsu_sweep(values: &[f64], rel: f64) -> Option<(f64, f64, Vec<usize>)> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max <= min {
        return None;
    }
    let width = (max - min) / 256.0;
    let mut counts = [0usize; 256];
    for &v in values {
        let b = (((v - min) / width).floor() as usize).min(255);
        counts[b] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let centre = |b: usize| min + (b as f64 + 0.5) * width;
    let n = values.len() as f64;
    let mut scores = Vec::with_capacity(255);
    for k in 1..256 {
        let (lo, hi) = counts.split_at(k);
        let w0: usize = lo.iter().sum();
        let w1: usize = hi.iter().sum();
        if w0 == 0 || w1 == 0 {
            scores.push(f64::NEG_INFINITY);
            continue;
        }
        let m0 = lo.iter().enumerate().map(|(b, &c)| c as f64 * centre(b)).sum::<f64>() / w0 as f64;
        let m1 = hi.iter().enumerate().map(|(b, &c)| c as f64 * centre(b + k)).sum::<f64>() / w1 as f64;
        scores.push((w0 as f64 / n) * (w1 as f64 / n) * (m0 - m1).powi(2));
    }
    let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let near = (1..256).filter(|&k| scores[k - 1] >= best - rel * best.abs()).collect();
    Some((min, width, near))
}

/// Central finite difference of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &Array2<f64>, h: f64, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(x.dim());
    let mut probe = x.clone();
    for idx in ndarray::indices(x.dim()) {
        let orig = probe[idx];
        probe[idx] = orig + h;
        let up = f(&probe);
        probe[idx] = orig - h;
        let down = f(&probe);
        probe[idx] = orig;
        g[idx] = (up - down) / (2.0 * h);
    }
    g
}

/// `||a - b|| / max(||a||, ||b||)` in the Frobenius norm.
pub fn rel_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let norm = |m: &Array2<f64>| m.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff = a - b;
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub const GRAD_STEP: f64 = 1e-4;

/// Worst relative gradient error of the dense contrastive loss on a random
/// 3x3x4 instance.
pub fn nce_grad_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_matrix(9, 4, &mut r);
    let b = random_matrix(9, 4, &mut r);
    let valid: Vec<bool> = (0..9).map(|i| i == 0 || r.gen_bool(0.8)).collect();
    let tau = r.gen_range(0.2..1.0);
    let l = loss_nce(a.view(), b.view(), &valid, tau).unwrap();
    let na = numeric_grad(&a, GRAD_STEP, |x| loss_nce(x.view(), b.view(), &valid, tau).unwrap().value);
    let nb = numeric_grad(&b, GRAD_STEP, |x| loss_nce(a.view(), x.view(), &valid, tau).unwrap().value);
    rel_error(&l.grad_a, &na).max(rel_error(&l.grad_b, &nb))
}

pub fn stat_grad_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_matrix(9, 4, &mut r);
    let b = random_matrix(9, 4, &mut r) * 1.5;
    let valid: Vec<bool> = (0..9).map(|i| i < 2 || r.gen_bool(0.8)).collect();
    let l = loss_stat(a.view(), b.view(), &valid).unwrap();
    let na = numeric_grad(&a, GRAD_STEP, |x| loss_stat(x.view(), b.view(), &valid).unwrap().value());
    let nb = numeric_grad(&b, GRAD_STEP, |x| loss_stat(a.view(), x.view(), &valid).unwrap().value());
    rel_error(&l.grad_a, &na).max(rel_error(&l.grad_b, &nb))
}

/// Prototype loss differentiated with respect to the original and the
/// augmented feature volumes through masked pooling.
pub fn proto_grad_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let orig = random_matrix(9, 4, &mut r);
    let aug = random_matrix(9, 4, &mut r);
    let mask: Vec<Option<f64>> = (0..9)
        .map(|i| match i {
            0 => Some(1.0),
            1 => Some(0.0),
            _ => Some(r.gen_range(0.0..=1.0)),
        })
        .collect();
    let loss = |o: &Array2<f64>, a: &Array2<f64>| {
        let po = masked_prototypes(&[o.view()], &[mask.clone()]);
        let pa = masked_prototypes(&[a.view()], &[mask.clone()]);
        loss_proto(&po, &pa).unwrap()
    };
    let l = loss(&orig, &aug);
    let po = masked_prototypes(&[orig.view()], &[mask.clone()]);
    let pa = masked_prototypes(&[aug.view()], &[mask.clone()]);
    let mut g_orig = Array2::zeros((9, 4));
    let mut g_aug = Array2::zeros((9, 4));
    for (i, m) in mask.iter().enumerate() {
        let m = m.unwrap();
        g_orig.row_mut(i).scaled_add(m / po.fg_weight, &l.grad_fg);
        g_aug.row_mut(i).scaled_add(m / pa.fg_weight, &l.grad_fg_aug);
        g_aug.row_mut(i).scaled_add((1.0 - m) / pa.bg_weight, &l.grad_bg_aug);
    }
    let no = numeric_grad(&orig, GRAD_STEP, |x| loss(x, &aug).value);
    let na = numeric_grad(&aug, GRAD_STEP, |x| loss(&orig, x).value);
    rel_error(&g_orig, &no).max(rel_error(&g_aug, &na))
}
