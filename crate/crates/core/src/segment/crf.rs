//! Two-label fully connected CRF with Gaussian and bilateral Potts kernels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::lattice::{exact_filter, Lattice};
use crate::error::{Error, Result};
use crate::grid::{Grid, Mask, RgbImage, ScoreMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum CrfBackend {
    /// Permutohedral lattice, linear in pixel count.
    #[default]
    Lattice,
    /// Dense pairwise sums. Quadratic; meant for small images and tests.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrfConfig {
    pub sxy_gaussian: f64,
    pub sxy_bilateral: f64,
    pub srgb: f64,
    pub compat_gaussian: f64,
    pub compat_bilateral: f64,
    pub iterations: usize,
    pub temperature: f64,
    pub backend: CrfBackend,
}

impl Default for CrfConfig {
    fn default() -> Self {
        Self {
            sxy_gaussian: 1.0,
            sxy_bilateral: 35.0,
            srgb: 13.0,
            compat_gaussian: 2.0,
            compat_bilateral: 1.0,
            iterations: 10,
            temperature: 1.0,
            backend: CrfBackend::Lattice,
        }
    }
}

impl CrfConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.sxy_gaussian) || !positive(self.sxy_bilateral) || !positive(self.srgb) {
            return Err(Error::config("CRF standard deviations must be positive"));
        }
        if self.iterations == 0 {
            return Err(Error::config("CRF needs at least one iteration"));
        }
        if !self.temperature.is_finite() || !self.compat_gaussian.is_finite() || !self.compat_bilateral.is_finite() {
            return Err(Error::config("CRF weights must be finite"));
        }
        Ok(())
    }
}

/// One symmetric-normalized Gaussian kernel.
struct Kernel {
    features: Vec<f64>,
    dim: usize,
    lattice: Option<Lattice>,
    /// `1 / sqrt(sum_j k_ij)`.
    norm: Vec<f64>,
    weight: f64,
}

impl Kernel {
    fn new(features: Vec<f64>, dim: usize, weight: f64, backend: CrfBackend) -> Self {
        let n = features.len() / dim;
        let lattice = (backend == CrfBackend::Lattice).then(|| Lattice::new(&features, dim));
        let mut kernel = Self { features, dim, lattice, norm: vec![1.0; n], weight };
        let sums = kernel.raw(&vec![1.0; n], 1);
        kernel.norm = sums.iter().map(|s| 1.0 / (s + 1e-20).sqrt()).collect();
        kernel
    }

    fn raw(&self, values: &[f64], channels: usize) -> Vec<f64> {
        match &self.lattice {
            Some(l) => l.filter(values, channels),
            None => exact_filter(&self.features, self.dim, values, channels),
        }
    }

    /// Adds `weight * N K N q` into `acc`.
    fn accumulate(&self, q: &[f64], channels: usize, acc: &mut [f64]) {
        let scaled: Vec<f64> = q
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.norm[i / channels])
            .collect();
        let filtered = self.raw(&scaled, channels);
        for (i, (a, f)) in acc.iter_mut().zip(&filtered).enumerate() {
            *a += self.weight * f * self.norm[i / channels];
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Mean-field inference. Foreground probability of the unary is
/// `sigmoid(T (soft - tau))`; returns the argmax labeling.
pub fn crf_refine(image: &RgbImage, soft: &ScoreMap, tau: f64, cfg: &CrfConfig) -> Result<Mask> {
    cfg.validate()?;
    if !image.same_dims(soft) {
        return Err(Error::shape(format!(
            "image {:?} vs score map {:?}",
            image.dims(),
            soft.dims()
        )));
    }
    let (w, h) = soft.dims();
    let n = w * h;

    // unary energies, label 0 = background, 1 = foreground
    let unary: Vec<f64> = soft
        .as_slice()
        .iter()
        .flat_map(|&s| {
            let x = cfg.temperature * (s - tau);
            [softplus(x), softplus(-x)]
        })
        .collect();

    let mut spatial = Vec::with_capacity(2 * n);
    let mut bilateral = Vec::with_capacity(5 * n);
    for y in 0..h {
        for x in 0..w {
            spatial.extend([x as f64 / cfg.sxy_gaussian, y as f64 / cfg.sxy_gaussian]);
            let rgb = image.get(x, y);
            bilateral.extend([
                x as f64 / cfg.sxy_bilateral,
                y as f64 / cfg.sxy_bilateral,
                rgb[0] / cfg.srgb,
                rgb[1] / cfg.srgb,
                rgb[2] / cfg.srgb,
            ]);
        }
    }
    let (gaussian, bilateral) = rayon::join(
        || Kernel::new(spatial, 2, cfg.compat_gaussian, cfg.backend),
        || Kernel::new(bilateral, 5, cfg.compat_bilateral, cfg.backend),
    );

    let neg_unary: Vec<f64> = unary.iter().map(|u| -u).collect();
    let mut q = softmax_pairs(&neg_unary);
    for _ in 0..cfg.iterations {
        let mut logits = neg_unary.clone();
        gaussian.accumulate(&q, 2, &mut logits);
        bilateral.accumulate(&q, 2, &mut logits);
        q = softmax_pairs(&logits);
    }
    let labels = q.chunks_exact(2).map(|p| p[1] > p[0]).collect();
    Grid::new(w, h, labels)
}

fn softmax_pairs(logits: &[f64]) -> Vec<f64> {
    logits
        .par_chunks_exact(2)
        .flat_map_iter(|l| {
            let m = l[0].max(l[1]);
            let a = (l[0] - m).exp();
            let b = (l[1] - m).exp();
            [a / (a + b), b / (a + b)]
        })
        .collect()
}
