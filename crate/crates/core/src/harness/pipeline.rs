//! Episode orchestration: features, views, fitting, comparison and
//! segmentation, per query or with one fit reused across queries.

use std::sync::Arc;
use std::time::Instant;

use log::debug;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::config::{Refinement, RunConfig};
use super::episode::{Episode, Query};
use super::{content_seed, mix_seed};
use crate::adapt::{
    adapt_level, adapter_forward, fit_adapters, AdapterStack, ImageLevel, LevelEpisode, Mode, ViewLevel,
};
use crate::analysis::{class_partition, class_similarities, LevelSimilarity, PairMode};
use crate::compare::{concat_shots, correlation_map, CorrelationInputs};
use crate::error::{Error, Result};
use crate::features::FeatureVolume;
use crate::grid::{resize_nearest, resize_rgb, Mask, RgbImage, ScoreMap};
use crate::metrics::{Counts, EpisodeRecord};
use crate::pyramid::{
    create_backbone, downsample_mask, extract_pyramid, make_views, Backbone, ProviderOptions, Resampler,
};
use crate::segment::{decide_refinement, predict, PseudoEpisode, RefinementDecision};

/// Backbone weights are fixed; they never depend on the run seed.
pub const BACKBONE_SEED: u64 = 0;

pub fn backbone_for(cfg: &RunConfig) -> Result<Arc<dyn Backbone>> {
    create_backbone(
        &cfg.backbone,
        &ProviderOptions { seed: BACKBONE_SEED, weights: cfg.weights.clone(), toy_levels: None },
    )
}

/// One image at working resolution with its per-level volumes and views.
#[derive(Debug, Clone)]
pub struct PreparedImage {
    pub image: RgbImage,
    pub levels: Vec<ImageLevel>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryPrediction {
    pub query: usize,
    /// At the query's native resolution.
    pub mask: Mask,
    /// At working resolution.
    pub fused: ScoreMap,
    pub per_level: Vec<ScoreMap>,
    pub threshold: f64,
    pub refined: bool,
    pub decision: Option<RefinementDecision>,
    pub counts: Option<Counts>,
    pub loss_trace: Vec<f64>,
    pub fit_seconds: f64,
    pub infer_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode: String,
    pub class_id: usize,
    pub predictions: Vec<QueryPrediction>,
    pub seconds: f64,
}

impl EpisodeResult {
    /// Records of the queries that have ground truth.
    pub fn records(&self) -> Vec<EpisodeRecord> {
        self.predictions
            .iter()
            .filter_map(|p| {
                p.counts.map(|c| {
                    let mut r = EpisodeRecord::new(&self.episode, p.query, self.class_id, c);
                    r.refined = Some(p.refined);
                    r
                })
            })
            .collect()
    }
}

/// Support side of an episode, prepared once and shared by every query.
pub struct TaskSession {
    cfg: RunConfig,
    backbone: Arc<dyn Backbone>,
    seed: u64,
    supports: Vec<PreparedImage>,
    /// Per level, per shot: downsampled mask values.
    support_masks: Vec<Vec<Vec<f64>>>,
    /// Per shot, at working resolution.
    working_masks: Vec<Mask>,
}

/// Configured (or native) size rounded up to a multiple of `stride`.
pub fn working_dims(cfg: &RunConfig, native: (usize, usize), stride: usize) -> (usize, usize) {
    let (w, h) = cfg.input_size.unwrap_or(native);
    (w.div_ceil(stride) * stride, h.div_ceil(stride) * stride)
}

fn to_working(cfg: &RunConfig, image: &RgbImage, stride: usize) -> RgbImage {
    let (w, h) = working_dims(cfg, image.dims(), stride);
    if image.dims() == (w, h) {
        image.clone()
    } else {
        resize_rgb(image, w, h)
    }
}

fn mask_to_working(cfg: &RunConfig, mask: &Mask, stride: usize) -> Mask {
    let (w, h) = working_dims(cfg, mask.dims(), stride);
    if mask.dims() == (w, h) {
        mask.clone()
    } else {
        resize_nearest(mask, w, h)
    }
}

impl TaskSession {
    pub fn new(episode: &Episode, cfg: &RunConfig, backbone: Arc<dyn Backbone>) -> Result<Self> {
        cfg.validate()?;
        episode.validate()?;
        let episode = if episode.shots() > cfg.shots { episode.with_shots(cfg.shots)? } else { episode.clone() };
        let seed = mix_seed(cfg.seed, episode.seed);
        let levels = backbone.spec().level_count();
        let mut supports = Vec::with_capacity(episode.shots());
        let mut support_masks = vec![Vec::with_capacity(episode.shots()); levels];
        let mut working_masks = Vec::with_capacity(episode.shots());
        for shot in &episode.support {
            let stride = backbone.spec().max_stride();
            let image = to_working(cfg, &shot.image, stride);
            let mask = mask_to_working(cfg, &shot.mask, stride);
            let pyramid = downsample_mask(&mask, backbone.spec())?;
            for (l, m) in pyramid.levels.into_iter().enumerate() {
                support_masks[l].push(m.into_vec());
            }
            supports.push(prepare(&image, Some(&mask), cfg, backbone.as_ref(), seed)?);
            working_masks.push(mask);
        }
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            seed,
            supports,
            support_masks,
            working_masks,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    fn stride(&self) -> usize {
        self.backbone.spec().max_stride()
    }

    pub fn prepare_query(&self, image: &RgbImage) -> Result<PreparedImage> {
        prepare(&to_working(&self.cfg, image, self.stride()), None, &self.cfg, self.backbone.as_ref(), self.seed)
    }

    /// Original-frame features only, enough for inference.
    pub fn prepare_features(&self, image: &RgbImage) -> Result<PreparedImage> {
        let image = to_working(&self.cfg, image, self.stride());
        let levels = extract_pyramid(&image, self.backbone.as_ref())?
            .levels
            .into_iter()
            .map(|original| ImageLevel { original, views: Vec::new() })
            .collect();
        Ok(PreparedImage { image, levels })
    }

    fn level_episodes(&self, query: Option<&PreparedImage>) -> Vec<LevelEpisode> {
        (0..self.support_masks.len())
            .map(|l| LevelEpisode {
                queries: query.map(|q| vec![q.levels[l].clone()]).unwrap_or_default(),
                supports: self.supports.iter().map(|s| s.levels[l].clone()).collect(),
                support_masks: self.support_masks[l].clone(),
            })
            .collect()
    }

    /// Fits the heads on the supports and `query`, then freezes the support
    /// side and settles the refinement decision.
    pub fn fit(&self, query: &PreparedImage) -> Result<FittedTask> {
        let start = Instant::now();
        let levels = self.level_episodes(Some(query));
        let stack = fit_adapters(&levels, &self.cfg.loss, self.seed)?;
        let adapted = levels
            .iter()
            .zip(&stack.params)
            .map(|(level, params)| adapt_level(level, params, Mode::Infer))
            .collect::<Result<Vec<_>>>()?;
        let decision = match self.cfg.refinement {
            Refinement::Never => None,
            mode => {
                let pseudo = PseudoEpisode::build(&self.supports[0].image, &self.working_masks[0], &levels, &adapted)?;
                let mut d = decide_refinement(&pseudo, &self.cfg.crf)?;
                if mode == Refinement::Always {
                    d.refine = true;
                }
                Some(d)
            }
        };
        let support_features = adapted
            .into_iter()
            .map(|a| a.supports.into_iter().map(|s| s.original).collect())
            .collect();
        Ok(FittedTask {
            stack,
            support_features,
            decision,
            fit_seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Predicts one query with a fitted task; no fitting happens here.
    pub fn infer(&self, task: &FittedTask, index: usize, query: &Query, prepared: &PreparedImage) -> Result<QueryPrediction> {
        if task.stack.level_count() != self.support_masks.len() {
            return Err(Error::shape("adapter stack does not match the backbone levels"));
        }
        let start = Instant::now();
        let per_level = (0..self.support_masks.len())
            .map(|l| {
                let q = adapter_forward(&prepared.levels[l].original, &task.stack.params[l], Mode::Infer)?;
                let shots: Vec<ArrayView2<'_, f64>> = task.support_features[l].iter().map(|s| s.view()).collect();
                let masks: Vec<&[f64]> = self.support_masks[l].iter().map(|m| m.as_slice()).collect();
                let (keys, values) = concat_shots(&shots, &masks)?;
                correlation_map(&CorrelationInputs::new(&q, keys, values)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let pred = predict(&prepared.image, per_level, task.decision, &self.cfg.crf)?;
        let mask = if pred.mask.dims() == query.image.dims() {
            pred.mask
        } else {
            resize_nearest(&pred.mask, query.image.width(), query.image.height())
        };
        let counts = query.mask.as_ref().map(|gt| Counts::from_masks(&mask, gt)).transpose()?;
        Ok(QueryPrediction {
            query: index,
            mask,
            fused: pred.fused,
            per_level: pred.per_level,
            threshold: pred.threshold,
            refined: pred.refined,
            decision: pred.decision,
            counts,
            loss_trace: task.stack.loss_trace.clone(),
            fit_seconds: 0.0,
            infer_seconds: start.elapsed().as_secs_f64(),
        })
    }
}

impl TaskSession {
    /// Class similarities of query `prepared` (ground truth `mask`) against
    /// every shot, averaged over shots: on backbone features and on the
    /// adapted features of `task`.
    pub fn similarities(
        &self,
        task: &FittedTask,
        prepared: &PreparedImage,
        mask: &Mask,
        mode: PairMode,
    ) -> Result<EmbeddingComparison> {
        let mask = mask_to_working(&self.cfg, mask, self.stride());
        let levels = self.support_masks.len();
        let mut before = Vec::with_capacity(levels);
        let mut after = Vec::with_capacity(levels);
        for l in 0..levels {
            let q = &prepared.levels[l].original;
            let q_adapted = adapter_forward(q, &task.stack.params[l], Mode::Infer)?;
            let pq = class_partition(q, &mask)?;
            let pq_adapted = class_partition(&q_adapted, &mask)?;
            let mut b = Vec::new();
            let mut a = Vec::new();
            for (s, shot_mask) in self.supports.iter().zip(&self.working_masks) {
                let vol = &s.levels[l].original;
                b.push(class_similarities(&pq, &class_partition(vol, shot_mask)?, mode));
            }
            for (features, shot_mask) in task.support_features[l].iter().zip(&self.working_masks) {
                let vol = FeatureVolume::new(q.height(), q.width(), features.clone())?;
                a.push(class_similarities(&pq_adapted, &class_partition(&vol, shot_mask)?, mode));
            }
            before.push(LevelSimilarity::mean_of(&b));
            after.push(LevelSimilarity::mean_of(&a));
        }
        Ok(EmbeddingComparison { before, after })
    }
}

/// Per-level similarity statistics before and after adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingComparison {
    pub before: Vec<LevelSimilarity>,
    pub after: Vec<LevelSimilarity>,
}

/// Fits on every query with ground truth and averages the similarity
/// statistics over queries.
pub fn analyze_episode(
    episode: &Episode,
    cfg: &RunConfig,
    backbone: Arc<dyn Backbone>,
    mode: PairMode,
) -> Result<EmbeddingComparison> {
    let run = || -> Result<EmbeddingComparison> {
        let session = TaskSession::new(episode, cfg, backbone)?;
        let mut per_query = Vec::new();
        for (j, query) in episode.queries.iter().enumerate() {
            let mask = query.mask.as_ref().ok_or(Error::MissingGroundTruth(j))?;
            let prepared = session.prepare_query(&query.image)?;
            let task = session.fit(&prepared)?;
            per_query.push(session.similarities(&task, &prepared, mask, mode)?);
        }
        let levels = per_query[0].before.len();
        let avg = |pick: fn(&EmbeddingComparison) -> &Vec<LevelSimilarity>| -> Vec<LevelSimilarity> {
            (0..levels)
                .map(|l| LevelSimilarity::mean_of(&per_query.iter().map(|c| pick(c)[l]).collect::<Vec<_>>()))
                .collect()
        };
        Ok(EmbeddingComparison { before: avg(|c| &c.before), after: avg(|c| &c.after) })
    };
    run().map_err(|e| e.in_episode(&episode.id))
}

/// Fitted heads plus the frozen adapted support features.
#[derive(Debug, Clone)]
pub struct FittedTask {
    pub stack: AdapterStack,
    /// Per level, per shot: adapted original-frame support features.
    pub support_features: Vec<Vec<Array2<f64>>>,
    pub decision: Option<RefinementDecision>,
    pub fit_seconds: f64,
}

fn prepare(
    image: &RgbImage,
    mask: Option<&Mask>,
    cfg: &RunConfig,
    backbone: &dyn Backbone,
    seed: u64,
) -> Result<PreparedImage> {
    let spec = backbone.spec();
    let views = make_views(image, mask, cfg.augmentations, cfg.max_shear_deg, mix_seed(seed, content_seed(image)))?;
    let original = extract_pyramid(image, backbone)?.levels;
    let view_pyramids = views
        .views
        .iter()
        .map(|v| extract_pyramid(&v.image, backbone).map(|p| p.levels))
        .collect::<Result<Vec<_>>>()?;
    let mut levels = Vec::with_capacity(original.len());
    for (l, vol) in original.into_iter().enumerate() {
        let stride = spec.level_shapes[l].stride;
        let (h, w) = (vol.height(), vol.width());
        let views = views
            .views
            .iter()
            .zip(&view_pyramids)
            .map(|(v, pyr)| {
                Ok(ViewLevel {
                    features: pyr[l].clone(),
                    resampler: Resampler::backprojection(&v.affine, stride, h, w)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        levels.push(ImageLevel { original: vol, views });
    }
    Ok(PreparedImage { image: image.clone(), levels })
}

/// Fits per query: every query gets its own heads.
pub fn run_episode(episode: &Episode, cfg: &RunConfig, backbone: Arc<dyn Backbone>) -> Result<EpisodeResult> {
    let run = || -> Result<EpisodeResult> {
        if cfg.quick_infer {
            let session = TaskSession::new(episode, cfg, backbone)?;
            let first = session.prepare_query(&episode.queries[0].image)?;
            let task = session.fit(&first)?;
            return quick_infer_with(&session, &task, episode, Some(first));
        }
        let start = Instant::now();
        let session = TaskSession::new(episode, cfg, backbone)?;
        let mut predictions = Vec::with_capacity(episode.queries.len());
        for (j, query) in episode.queries.iter().enumerate() {
            let prepared = session.prepare_query(&query.image)?;
            let task = session.fit(&prepared)?;
            debug!("{} query {j}: fit in {:.2}s", episode.id, task.fit_seconds);
            let mut p = session.infer(&task, j, query, &prepared)?;
            p.fit_seconds = task.fit_seconds;
            predictions.push(p);
        }
        Ok(EpisodeResult {
            episode: episode.id.clone(),
            class_id: episode.class_id,
            predictions,
            seconds: start.elapsed().as_secs_f64(),
        })
    };
    run().map_err(|e| e.in_episode(&episode.id))
}

/// Predicts every query of `episode` with one fitted task.
pub fn quick_infer(session: &TaskSession, task: &FittedTask, episode: &Episode) -> Result<EpisodeResult> {
    quick_infer_with(session, task, episode, None).map_err(|e| e.in_episode(&episode.id))
}

fn quick_infer_with(
    session: &TaskSession,
    task: &FittedTask,
    episode: &Episode,
    first: Option<PreparedImage>,
) -> Result<EpisodeResult> {
    let start = Instant::now();
    let mut first = first;
    let mut predictions = Vec::with_capacity(episode.queries.len());
    for (j, query) in episode.queries.iter().enumerate() {
        let prepared = match first.take() {
            Some(p) if j == 0 => p,
            _ => session.prepare_features(&query.image)?,
        };
        predictions.push(session.infer(task, j, query, &prepared)?);
    }
    if let Some(p) = predictions.first_mut() {
        p.fit_seconds = task.fit_seconds;
    }
    Ok(EpisodeResult {
        episode: episode.id.clone(),
        class_id: episode.class_id,
        predictions,
        seconds: task.fit_seconds + start.elapsed().as_secs_f64(),
    })
}
