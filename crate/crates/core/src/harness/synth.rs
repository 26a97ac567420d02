//! Procedural episodes: textured foreground blobs on a textured background,
//! with a separation knob interpolating the foreground texture away from
//! the background one.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::episode::{Episode, Query, Shot};
use crate::adapt::level_seed;
use crate::error::{Error, Result};
use crate::grid::{Grid, Mask, RgbImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub shots: usize,
    pub queries: usize,
    /// 0 gives statistically identical classes; 1 fully distinct textures.
    pub separation: f64,
    /// Foreground pixel fraction range; a degenerate range fixes the ratio
    /// exactly (up to rounding to whole pixels).
    pub fg_ratio: (f64, f64),
    /// Standard deviation of per-pixel color noise.
    pub noise: f64,
    /// Share of the separation applied to the base color; the stripe
    /// pattern always receives the full separation.
    pub color_weight: f64,
    pub classes: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            shots: 1,
            queries: 1,
            separation: 1.0,
            fg_ratio: (0.2, 0.5),
            noise: 12.0,
            color_weight: 1.0,
            classes: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("synthetic images need a positive size"));
        }
        if self.shots == 0 || self.queries == 0 || self.classes == 0 {
            return Err(Error::config("need at least one shot, query and class"));
        }
        let (lo, hi) = self.fg_ratio;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::config(format!("foreground ratio range ({lo}, {hi}) must lie in (0, 1)")));
        }
        if ((lo * (self.width * self.height) as f64).round() as usize) == 0 {
            return Err(Error::config("foreground would have zero area"));
        }
        if !(self.separation >= 0.0 && self.noise >= 0.0 && self.color_weight >= 0.0) {
            return Err(Error::config("separation, noise and color weight must be non-negative"));
        }
        Ok(())
    }
}

/// Stripe texture with color noise.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Texture {
    color: [f64; 3],
    stripe_color: [f64; 3],
    frequency: f64,
    angle: f64,
}

impl Texture {
    fn random(rng: &mut impl Rng) -> Self {
        let mut c = || [rng.gen_range(40.0..215.0), rng.gen_range(40.0..215.0), rng.gen_range(40.0..215.0)];
        let color = c();
        let stripe_color = c();
        Self {
            color,
            stripe_color: [
                stripe_color[0] - color[0],
                stripe_color[1] - color[1],
                stripe_color[2] - color[2],
            ],
            frequency: rng.gen_range(0.06..0.3),
            angle: rng.gen_range(0.0..PI),
        }
    }

    fn lerp(&self, other: &Texture, t: f64, color_t: f64) -> Texture {
        let l = |a: f64, b: f64| a + t * (b - a);
        Texture {
            color: [0, 1, 2].map(|i| self.color[i] + color_t * (other.color[i] - self.color[i])),
            stripe_color: [0, 1, 2].map(|i| l(self.stripe_color[i], other.stripe_color[i])),
            frequency: l(self.frequency, other.frequency),
            angle: l(self.angle, other.angle),
        }
    }

    fn sample(&self, x: f64, y: f64, phase: f64) -> [f64; 3] {
        let u = x * self.angle.cos() + y * self.angle.sin();
        let s = 0.5 + 0.5 * (2.0 * PI * self.frequency * u + phase).sin();
        [0, 1, 2].map(|i| self.color[i] + s * self.stripe_color[i])
    }
}

/// Foreground as the top-`n` pixels of a sum of random Gaussian bumps.
fn blob_mask(w: usize, h: usize, n: usize, rng: &mut impl Rng) -> Mask {
    let bumps: Vec<(f64, f64, f64)> = (0..rng.gen_range(1..=3))
        .map(|_| {
            let cx = rng.gen_range(0.0..1.0) * w as f64;
            let cy = rng.gen_range(0.0..1.0) * h as f64;
            let s = rng.gen_range(0.15..0.35) * w.min(h) as f64;
            (cx, cy, s)
        })
        .collect();
    let score = |x: usize, y: usize| -> f64 {
        bumps
            .iter()
            .map(|&(cx, cy, s)| {
                let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                (-d2 / (2.0 * s * s)).exp()
            })
            .sum()
    };
    let scores: Vec<f64> = (0..w * h).map(|i| score(i % w, i / w)).collect();
    let mut order: Vec<usize> = (0..w * h).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut data = vec![false; w * h];
    for &i in &order[..n] {
        data[i] = true;
    }
    Grid::new(w, h, data).expect("sized")
}

fn render(
    mask: &Mask,
    fg: &Texture,
    bg: &Texture,
    noise: f64,
    rng: &mut impl Rng,
) -> RgbImage {
    let normal = Normal::new(0.0, noise.max(1e-12)).expect("finite");
    // one phase for both classes, so equal textures leave no seam
    let phase = rng.gen_range(0.0..2.0 * PI);
    Grid::from_fn(mask.width(), mask.height(), |x, y| {
        let t = if *mask.get(x, y) { fg } else { bg };
        let c = t.sample(x as f64, y as f64, phase);
        c.map(|v| {
            let n = if noise > 0.0 { normal.sample(rng) } else { 0.0 };
            (v + n).clamp(0.0, 255.0)
        })
    })
}

/// Deterministic episode for `seed`.
pub fn synthesize_episode(seed: u64, spec: &SynthSpec) -> Result<Episode> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = Texture::random(&mut rng);
    let alt = Texture::random(&mut rng);
    let t = spec.separation.min(1.0);
    let fg = bg.lerp(&alt, t, (t * spec.color_weight).min(1.0));
    let class_id = rng.gen_range(0..spec.classes);
    let pixels = spec.width * spec.height;
    let image = |rng: &mut ChaCha8Rng| {
        let (lo, hi) = spec.fg_ratio;
        let ratio = if lo == hi { lo } else { rng.gen_range(lo..hi) };
        let n = ((ratio * pixels as f64).round() as usize).clamp(1, pixels - 1);
        let mask = blob_mask(spec.width, spec.height, n, rng);
        let image = render(&mask, &fg, &bg, spec.noise, rng);
        (image, mask)
    };
    let support = (0..spec.shots)
        .map(|_| {
            let (image, mask) = image(&mut rng);
            Shot { image, mask }
        })
        .collect();
    let queries = (0..spec.queries)
        .map(|_| {
            let (image, mask) = image(&mut rng);
            Query { image, mask: Some(mask) }
        })
        .collect();
    Ok(Episode { id: format!("synth_{seed:016x}"), class_id, support, queries, seed })
}

/// `count` episodes with seeds derived from `seed` and the episode index.
pub fn synthesize_suite(count: usize, seed: u64, spec: &SynthSpec) -> Result<Vec<Episode>> {
    (0..count)
        .map(|i| {
            let mut ep = synthesize_episode(level_seed(seed, i), spec)?;
            ep.id = format!("ep{i:04}");
            Ok(ep)
        })
        .collect()
}
