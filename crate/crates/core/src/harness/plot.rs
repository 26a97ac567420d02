//! Raster plots without text: score histograms, per-level map grids,
//! random-predictor surfaces and per-query IoU bars.

use std::io::Write;
use std::path::Path;

use image::{Rgb, RgbImage as Canvas};

use crate::error::{Error, Result};
use crate::grid::{resize_bilinear, Mask, ScoreMap};
use crate::metrics::{expected_random_iou, EpisodeRecord, RatioPair};
use crate::segment::{Histogram, OTSU_BINS};

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const BAR: Rgb<u8> = Rgb([110, 110, 110]);
const MEAN_LINE: Rgb<u8> = Rgb([30, 90, 220]);
const THRESHOLD_LINE: Rgb<u8> = Rgb([220, 40, 30]);

/// Blue-to-yellow ramp for values in `[0, 1]`.
pub fn colormap(v: f64) -> Rgb<u8> {
    let t = v.clamp(0.0, 1.0);
    let r = 68.0 + t * (253.0 - 68.0);
    let g = 1.0 + t * (231.0 - 1.0);
    let b = 84.0 + (1.0 - t) * 70.0 - t * 48.0;
    Rgb([r as u8, g as u8, b.clamp(0.0, 255.0) as u8])
}

/// Histogram bars plus the bins holding the mean and the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramLayout {
    pub counts: Vec<u64>,
    pub mean_bin: usize,
    pub threshold_bin: usize,
}

pub fn histogram_layout(map: &ScoreMap, threshold: f64) -> HistogramLayout {
    let hist = Histogram::of(map);
    HistogramLayout {
        mean_bin: Histogram::bin_of(map.mean(), hist.min, hist.max),
        threshold_bin: Histogram::bin_of(threshold, hist.min, hist.max),
        counts: hist.counts,
    }
}

pub fn plot_histogram(map: &ScoreMap, threshold: f64, path: &Path) -> Result<HistogramLayout> {
    let layout = histogram_layout(map, threshold);
    let (bar_w, height) = (2u32, 200u32);
    let mut canvas = Canvas::from_pixel(OTSU_BINS as u32 * bar_w, height, BACKGROUND);
    let peak = layout.counts.iter().copied().max().unwrap_or(1).max(1) as f64;
    for (b, &c) in layout.counts.iter().enumerate() {
        let h = (c as f64 / peak * (height - 1) as f64).round() as u32;
        for y in height - h..height {
            for dx in 0..bar_w {
                canvas.put_pixel(b as u32 * bar_w + dx, y, BAR);
            }
        }
    }
    for (bin, color) in [(layout.mean_bin, MEAN_LINE), (layout.threshold_bin, THRESHOLD_LINE)] {
        for y in 0..height {
            canvas.put_pixel(bin as u32 * bar_w, y, color);
        }
    }
    canvas.save(path)?;
    Ok(layout)
}

fn paint_map(canvas: &mut Canvas, x0: u32, map: &ScoreMap) {
    for y in 0..map.height() {
        for x in 0..map.width() {
            canvas.put_pixel(x0 + x as u32, y as u32, colormap(*map.get(x, y)));
        }
    }
}

/// One panel per level map (resized to the fused size), then the fused map
/// and the binarized mask. Returns the panel count.
pub fn plot_level_grid(per_level: &[ScoreMap], fused: &ScoreMap, mask: &Mask, path: &Path) -> Result<usize> {
    if !fused.same_dims(mask) {
        return Err(Error::shape("fused map and mask differ in size"));
    }
    let (w, h) = fused.dims();
    let gap = 4u32;
    let panels = per_level.len() + 2;
    let width = panels as u32 * (w as u32 + gap) - gap;
    let mut canvas = Canvas::from_pixel(width, h as u32, BACKGROUND);
    let mut x0 = 0;
    for m in per_level {
        paint_map(&mut canvas, x0, &resize_bilinear(m, w, h));
        x0 += w as u32 + gap;
    }
    paint_map(&mut canvas, x0, fused);
    x0 += w as u32 + gap;
    paint_map(&mut canvas, x0, &mask.to_scores());
    canvas.save(path)?;
    Ok(panels)
}

/// Expected (mIoU, FB-IoU) of a random predictor at cell centres; rows
/// index `r_y`, columns `r_hat`.
pub fn random_surface(n: usize) -> Vec<Vec<(f64, f64)>> {
    let c = |i: usize| (i as f64 + 0.5) / n as f64;
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| expected_random_iou(RatioPair { r_y: c(i), r_hat: c(j) }))
                .collect()
        })
        .collect()
}

pub fn write_surface_csv(n: usize, mut out: impl Write) -> Result<()> {
    writeln!(out, "r_y,r_hat,miou,fbiou")?;
    for (i, row) in random_surface(n).iter().enumerate() {
        for (j, (m, fb)) in row.iter().enumerate() {
            let c = |k: usize| (k as f64 + 0.5) / n as f64;
            writeln!(out, "{:.6},{:.6},{:.6},{:.6}", c(i), c(j), m, fb)?;
        }
    }
    Ok(())
}

/// Two heatmaps side by side (mIoU, FB-IoU), `r_y` growing upwards.
pub fn plot_surface(n: usize, path: &Path) -> Result<()> {
    let cell = 4u32;
    let side = n as u32 * cell;
    let gap = 8;
    let mut canvas = Canvas::from_pixel(2 * side + gap, side, BACKGROUND);
    for (i, row) in random_surface(n).iter().enumerate() {
        for (j, &(m, fb)) in row.iter().enumerate() {
            for dy in 0..cell {
                for dx in 0..cell {
                    let y = side - 1 - (i as u32 * cell + dy);
                    canvas.put_pixel(j as u32 * cell + dx, y, colormap(m));
                    canvas.put_pixel(side + gap + j as u32 * cell + dx, y, colormap(fb));
                }
            }
        }
    }
    canvas.save(path)?;
    Ok(())
}

/// Per-query foreground IoU as bars, sorted descending.
pub fn plot_report(records: &[EpisodeRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Empty("no records to plot".into()));
    }
    let mut ious: Vec<f64> = records.iter().map(|r| r.counts.fg_iou().unwrap_or(1.0)).collect();
    ious.sort_by(|a, b| b.total_cmp(a));
    let bar_w = (800 / ious.len() as u32).clamp(1, 16);
    let height = 200u32;
    let mut canvas = Canvas::from_pixel(bar_w * ious.len() as u32, height, BACKGROUND);
    for (k, v) in ious.iter().enumerate() {
        let h = (v * (height - 1) as f64).round() as u32;
        for y in height - h..height {
            for dx in 0..bar_w {
                canvas.put_pixel(k as u32 * bar_w + dx, y, colormap(*v));
            }
        }
    }
    canvas.save(path)?;
    Ok(())
}
