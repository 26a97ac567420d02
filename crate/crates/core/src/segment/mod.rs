//! Level fusion, thresholding and the CRF refinement decision.

mod crf;
pub mod lattice;
mod threshold;

use log::debug;
use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

pub use crf::{crf_refine, CrfBackend, CrfConfig};
pub use threshold::{binarize, binarize_at, otsu_threshold, threshold, Histogram, OTSU_BINS};

use crate::adapt::{AdaptedLevel, LevelEpisode};
use crate::compare::{correlation_map, CorrelationInputs};
use crate::error::{Error, Result};
use crate::grid::{resize_bilinear, Grid, Mask, RgbImage, ScoreMap};

/// Mean of the bilinearly resized level maps. Per pixel the level values are
/// summed in sorted order, so the result does not depend on level order.
pub fn fuse(per_level: &[ScoreMap], width: usize, height: usize) -> Result<ScoreMap> {
    if per_level.is_empty() {
        return Err(Error::Empty("no level maps to fuse".into()));
    }
    let resized: Vec<ScoreMap> = per_level
        .iter()
        .map(|m| resize_bilinear(m, width, height))
        .collect();
    let l = resized.len() as f64;
    let mut buf = Vec::with_capacity(resized.len());
    let data = (0..width * height)
        .map(|i| {
            buf.clear();
            buf.extend(resized.iter().map(|m| m.as_slice()[i]));
            buf.sort_by(f64::total_cmp);
            (buf.iter().sum::<f64>() / l).clamp(0.0, 1.0)
        })
        .collect();
    Grid::new(width, height, data)
}

/// Intersection over union of two masks; two empty masks score 1.
pub fn mask_iou(pred: &Mask, truth: &Mask) -> Result<f64> {
    if !pred.same_dims(truth) {
        return Err(Error::shape("masks differ in size"));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.as_slice().iter().zip(truth.as_slice()) {
        inter += usize::from(p && t);
        union += usize::from(p || t);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Outcome of the pseudo-episode check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementDecision {
    pub refine: bool,
    pub iou_refined: f64,
    pub iou_unrefined: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedPrediction {
    pub fused: ScoreMap,
    pub per_level: Vec<ScoreMap>,
    pub threshold: f64,
    pub refined: bool,
    pub decision: Option<RefinementDecision>,
    pub mask: Mask,
}

/// The first support shot treated as a query against the first view of
/// every shot, backprojected to its original frame.
#[derive(Debug, Clone)]
pub struct PseudoEpisode {
    pub image: RgbImage,
    pub mask: Mask,
    pub levels: Vec<CorrelationInputs>,
}

impl PseudoEpisode {
    /// `image` and `mask` belong to support shot 0; `levels` and `adapted`
    /// are the per-level fitting inputs and head outputs.
    pub fn build(
        image: &RgbImage,
        mask: &Mask,
        levels: &[LevelEpisode],
        adapted: &[AdaptedLevel],
    ) -> Result<Self> {
        if !image.same_dims(mask) {
            return Err(Error::shape("support image and mask differ in size"));
        }
        if levels.len() != adapted.len() || levels.is_empty() {
            return Err(Error::shape("one adapted output per level required"));
        }
        let inputs = levels
            .iter()
            .zip(adapted)
            .map(|(level, out)| pseudo_level(level, out))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { image: image.clone(), mask: mask.clone(), levels: inputs })
    }
}

fn pseudo_level(level: &LevelEpisode, adapted: &AdaptedLevel) -> Result<CorrelationInputs> {
    let first = level
        .supports
        .first()
        .ok_or_else(|| Error::Empty("no support shot".into()))?;
    let query = adapted.supports[0].original.clone();
    let mut keys = Vec::new();
    let mut values = Vec::new();
    for ((shot, out), mask) in level.supports.iter().zip(&adapted.supports).zip(&level.support_masks) {
        let (view, adapted_view) = match (shot.views.first(), out.views.first()) {
            (Some(v), Some(a)) => (v, a),
            _ => return Err(Error::Empty("support shot has no view".into())),
        };
        let back = view.resampler.apply(adapted_view.view());
        let valid = view.resampler.valid();
        let rows: Vec<usize> = (0..valid.len()).filter(|&i| valid[i]).collect();
        keys.push(back.select(Axis(0), &rows));
        values.extend(rows.iter().map(|&i| mask[i]));
    }
    let views: Vec<_> = keys.iter().map(Array2::view).collect();
    let keys = concatenate(Axis(0), &views).expect("uniform channel count");
    Ok(CorrelationInputs {
        query,
        query_height: first.original.height(),
        query_width: first.original.width(),
        keys,
        values,
    })
}

/// Runs the pseudo episode with and without the CRF and compares the IoUs
/// against the known support mask. Ties do not refine.
pub fn decide_refinement(pseudo: &PseudoEpisode, cfg: &CrfConfig) -> Result<RefinementDecision> {
    let maps = pseudo
        .levels
        .iter()
        .map(correlation_map)
        .collect::<Result<Vec<_>>>()?;
    let (w, h) = pseudo.image.dims();
    let fused = fuse(&maps, w, h)?;
    let t = threshold(&fused);
    let plain = binarize_at(&fused, t);
    let refined = crf_refine(&pseudo.image, &fused, t, cfg)?;
    let iou_unrefined = mask_iou(&plain, &pseudo.mask)?;
    let iou_refined = mask_iou(&refined, &pseudo.mask)?;
    let decision = RefinementDecision {
        refine: iou_refined > iou_unrefined,
        iou_refined,
        iou_unrefined,
    };
    debug!(
        "refinement decision: refine={} pseudo IoU refined {:.4} unrefined {:.4}",
        decision.refine, iou_refined, iou_unrefined
    );
    Ok(decision)
}

/// Fuses the query's level maps and binarizes them, through the CRF when
/// the decision says so. Without a decision the plain path is taken.
pub fn predict(
    query_image: &RgbImage,
    per_level: Vec<ScoreMap>,
    decision: Option<RefinementDecision>,
    cfg: &CrfConfig,
) -> Result<FusedPrediction> {
    let (w, h) = query_image.dims();
    let fused = fuse(&per_level, w, h)?;
    let t = threshold(&fused);
    let refined = decision.is_some_and(|d| d.refine);
    let mask = if refined {
        crf_refine(query_image, &fused, t, cfg)?
    } else {
        binarize_at(&fused, t)
    };
    Ok(FusedPrediction { fused, per_level, threshold: t, refined, decision, mask })
}

/// Decision plus prediction in one call.
pub fn refine_decision(
    query_image: &RgbImage,
    per_level: Vec<ScoreMap>,
    pseudo: &PseudoEpisode,
    cfg: &CrfConfig,
) -> Result<FusedPrediction> {
    let decision = decide_refinement(pseudo, cfg)?;
    predict(query_image, per_level, Some(decision), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fuse_constant_maps() {
        let a = Grid::filled(3, 3, 0.2);
        let b = Grid::filled(6, 6, 0.8);
        let f = fuse(&[a, b], 12, 12).unwrap();
        assert!(f.as_slice().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn fuse_single_level_is_resize() {
        let a = Grid::from_fn(4, 4, |x, y| (x + y) as f64 / 6.0);
        assert_eq!(fuse(&[a.clone()], 8, 8).unwrap(), resize_bilinear(&a, 8, 8));
    }

    #[test]
    fn fuse_rejects_empty() {
        assert!(fuse(&[], 4, 4).is_err());
    }

    #[test]
    fn iou_conventions() {
        let empty = Grid::filled(3, 3, false);
        assert_eq!(mask_iou(&empty, &empty).unwrap(), 1.0);
        let a = Grid::from_fn(4, 1, |x, _| x < 2);
        let b = Grid::from_fn(4, 1, |x, _| x >= 1 && x < 3);
        assert!((mask_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn predict_without_refinement_ignores_colors() {
        let maps = vec![Grid::from_fn(4, 4, |x, _| x as f64 / 3.0)];
        let red = Grid::filled(8, 8, [255.0, 0.0, 0.0]);
        let noise = Grid::from_fn(8, 8, |x, y| [(x * 31 % 255) as f64, (y * 17 % 255) as f64, 3.0]);
        let cfg = CrfConfig::default();
        let decision = RefinementDecision { refine: false, iou_refined: 0.1, iou_unrefined: 0.2 };
        let a = predict(&red, maps.clone(), Some(decision), &cfg).unwrap();
        let b = predict(&noise, maps, None, &cfg).unwrap();
        assert_eq!(a.mask, b.mask);
        assert!(!a.refined);
    }
}
