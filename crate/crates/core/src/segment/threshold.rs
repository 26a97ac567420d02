//! Histogram (Otsu) thresholding with a mean fallback.

use crate::grid::{Mask, ScoreMap};

pub const OTSU_BINS: usize = 256;
/// Relative tolerance under which two between-class variances count as tied.
const TIE_TOLERANCE: f64 = 1e-12;

/// 256-bin histogram over `[min, max]` of the map.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub min: f64,
    pub max: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn of(map: &ScoreMap) -> Self {
        let (min, max) = map.min_max();
        let mut counts = vec![0u64; OTSU_BINS];
        for &v in map.as_slice() {
            counts[Self::bin_of(v, min, max)] += 1;
        }
        Self { min, max, counts }
    }

    pub fn bin_width(&self) -> f64 {
        (self.max - self.min) / OTSU_BINS as f64
    }

    pub fn bin_of(v: f64, min: f64, max: f64) -> usize {
        if max <= min {
            return 0;
        }
        let t = (v - min) / (max - min) * OTSU_BINS as f64;
        (t.floor() as usize).min(OTSU_BINS - 1)
    }

    pub fn center(&self, bin: usize) -> f64 {
        self.min + (bin as f64 + 0.5) * self.bin_width()
    }

    /// Lower edge of `bin`.
    pub fn edge(&self, bin: usize) -> f64 {
        self.min + bin as f64 * self.bin_width()
    }

    pub fn occupied_bins(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

/// Splits the histogram at the bin edge maximizing between-class variance
/// (equivalently minimizing within-class variance). Edges inside an empty
/// gap all tie; the middle of the highest tied run is chosen so the cut sits
/// between the two clusters. Returns `None` for a single occupied bin.
pub fn otsu_threshold(map: &ScoreMap) -> Option<f64> {
    let hist = Histogram::of(map);
    if hist.occupied_bins() < 2 {
        return None;
    }
    let total: f64 = hist.counts.iter().sum::<u64>() as f64;
    let total_sum: f64 = hist
        .counts
        .iter()
        .enumerate()
        .map(|(b, &c)| c as f64 * hist.center(b))
        .sum();
    let mut weight_low = 0.0;
    let mut sum_low = 0.0;
    let mut variances = vec![f64::NEG_INFINITY; OTSU_BINS];
    // edge k separates bins [0, k) from [k, 256)
    for k in 1..OTSU_BINS {
        weight_low += hist.counts[k - 1] as f64;
        sum_low += hist.counts[k - 1] as f64 * hist.center(k - 1);
        let weight_high = total - weight_low;
        if weight_low == 0.0 || weight_high == 0.0 {
            continue;
        }
        let mean_low = sum_low / weight_low;
        let mean_high = (total_sum - sum_low) / weight_high;
        let w0 = weight_low / total;
        let w1 = weight_high / total;
        variances[k] = w0 * w1 * (mean_low - mean_high).powi(2);
    }
    let best = variances.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tied = |k: usize| variances[k] >= best - best.abs() * TIE_TOLERANCE;
    let top = (1..OTSU_BINS).rev().find(|&k| tied(k))?;
    let mut bottom = top;
    while bottom > 1 && tied(bottom - 1) {
        bottom -= 1;
    }
    Some(hist.edge((bottom + top) / 2))
}

/// Otsu's threshold when it exists and exceeds the map mean; the mean otherwise.
pub fn threshold(map: &ScoreMap) -> f64 {
    // clamped so that a constant map yields exactly its value
    let (min, max) = map.min_max();
    let mean = map.mean().clamp(min, max);
    match otsu_threshold(map) {
        Some(t) if t > mean => t,
        _ => mean,
    }
}

/// Strict comparison against a threshold.
pub fn binarize_at(map: &ScoreMap, threshold: f64) -> Mask {
    map.map(|&v| v > threshold)
}

/// Binarizes with [`threshold`].
pub fn binarize(map: &ScoreMap) -> Mask {
    binarize_at(map, threshold(map))
}
