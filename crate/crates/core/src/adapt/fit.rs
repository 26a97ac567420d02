//! Combined per-level objective and the test-time fitting loop.

use log::debug;
use ndarray::{concatenate, s, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::head::{AdapterParams, Mode, ParamGrads};
use super::losses::{loss_nce, loss_proto, loss_stat, masked_prototypes, prototype_backward, ProtoSkip};
use crate::error::{Error, Result};
use crate::features::FeatureVolume;
use crate::pyramid::Resampler;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub adapter_channels: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            epochs: 25,
            learning_rate: 0.01,
            momentum: 0.0,
            adapter_channels: 64,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.adapter_channels == 0 {
            return Err(Error::config("adapter channels must be positive"));
        }
        Ok(())
    }
}

/// One view of an image at one level: raw view-frame features plus the
/// operator that backprojects them to the original frame.
#[derive(Debug, Clone)]
pub struct ViewLevel {
    pub features: FeatureVolume,
    pub resampler: Resampler,
}

#[derive(Debug, Clone)]
pub struct ImageLevel {
    pub original: FeatureVolume,
    pub views: Vec<ViewLevel>,
}

/// Everything one level's head is fitted on.
#[derive(Debug, Clone)]
pub struct LevelEpisode {
    pub queries: Vec<ImageLevel>,
    pub supports: Vec<ImageLevel>,
    /// Per support shot, downsampled foreground mask (row-major, in `[0, 1]`).
    pub support_masks: Vec<Vec<f64>>,
}

impl LevelEpisode {
    fn volumes(&self) -> impl Iterator<Item = &FeatureVolume> {
        self.queries
            .iter()
            .chain(&self.supports)
            .flat_map(|img| std::iter::once(&img.original).chain(img.views.iter().map(|v| &v.features)))
    }

    pub fn channels(&self) -> usize {
        self.volumes().next().map_or(0, FeatureVolume::channels)
    }

    fn validate(&self) -> Result<()> {
        if self.supports.is_empty() {
            return Err(Error::Empty("episode level has no support".into()));
        }
        if self.support_masks.len() != self.supports.len() {
            return Err(Error::shape("one mask per support shot required"));
        }
        let c = self.channels();
        if self.volumes().any(|v| v.channels() != c) {
            return Err(Error::shape("all volumes of a level must share the channel count"));
        }
        for img in self.queries.iter().chain(&self.supports) {
            if img.views.is_empty() {
                return Err(Error::config("every image needs at least one view"));
            }
            let shape = img.original.shape();
            if img.views.iter().any(|v| v.features.shape() != shape) {
                return Err(Error::shape("view volumes must match their original"));
            }
        }
        for (img, mask) in self.supports.iter().zip(&self.support_masks) {
            if mask.len() != img.original.positions() {
                return Err(Error::shape("support mask does not match level size"));
            }
        }
        Ok(())
    }
}

/// Head outputs for one image: original frame and each view's frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedImage {
    pub original: Array2<f64>,
    pub views: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLevel {
    pub queries: Vec<AdaptedImage>,
    pub supports: Vec<AdaptedImage>,
}

impl AdaptedLevel {
    fn zeros_like(&self) -> Self {
        let z = |img: &AdaptedImage| AdaptedImage {
            original: Array2::zeros(img.original.raw_dim()),
            views: img.views.iter().map(|v| Array2::zeros(v.raw_dim())).collect(),
        };
        Self {
            queries: self.queries.iter().map(z).collect(),
            supports: self.supports.iter().map(z).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SkippedTerm {
    /// Fewer than two valid positions for a dense view pair.
    Nce { support: bool, image: usize, view: usize },
    Proto { view: usize, reason: ProtoReason },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProtoReason {
    NoForeground,
    NoBackground,
    ZeroNorm,
}

impl From<ProtoSkip> for ProtoReason {
    fn from(s: ProtoSkip) -> Self {
        match s {
            ProtoSkip::MissingForeground | ProtoSkip::MissingAugForeground => ProtoReason::NoForeground,
            ProtoSkip::MissingAugBackground => ProtoReason::NoBackground,
            ProtoSkip::ZeroNorm => ProtoReason::ZeroNorm,
        }
    }
}

/// Per-side consistency terms, each averaged over its (image, view) pairs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SideTerms {
    pub nce: f64,
    pub mean: f64,
    pub var: f64,
}

impl SideTerms {
    pub fn total(&self) -> f64 {
        self.nce + self.mean + self.var
    }
}

#[derive(Debug, Clone)]
pub struct CombinedLoss {
    pub query: SideTerms,
    pub support: SideTerms,
    pub proto: f64,
    pub total: f64,
    pub skipped: Vec<SkippedTerm>,
    pub grads: AdaptedLevel,
}

fn side_terms(
    images: &[ImageLevel],
    adapted: &[AdaptedImage],
    grads: &mut [AdaptedImage],
    tau: f64,
    support: bool,
    skipped: &mut Vec<SkippedTerm>,
) -> Option<SideTerms> {
    let mut nce = Vec::new();
    let mut stat = Vec::new();
    // (image, view, backprojected, valid) for every pair
    let mut pairs = Vec::new();
    for (i, (img, out)) in images.iter().zip(adapted).enumerate() {
        for (v, (view, view_out)) in img.views.iter().zip(&out.views).enumerate() {
            let back = view.resampler.apply(view_out.view());
            let valid = view.resampler.valid();
            let n_valid = valid.iter().filter(|&&b| b).count();
            if n_valid >= 2 {
                let l = loss_nce(out.original.view(), back.view(), &valid, tau).expect("valid positions");
                nce.push((i, v, l));
            } else {
                skipped.push(SkippedTerm::Nce { support, image: i, view: v });
            }
            if let Some(l) = loss_stat(out.original.view(), back.view(), &valid) {
                stat.push((i, v, l));
            }
            pairs.push((i, v));
        }
    }
    if nce.is_empty() && stat.is_empty() {
        return None;
    }
    let mut terms = SideTerms::default();
    let mut back_grads: Vec<Vec<Option<Array2<f64>>>> =
        adapted.iter().map(|a| vec![None; a.views.len()]).collect();
    let mut add_back = |i: usize, v: usize, g: Array2<f64>| {
        let slot = &mut back_grads[i][v];
        match slot {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        }
    };
    if !nce.is_empty() {
        let w = 1.0 / nce.len() as f64;
        for (i, v, l) in nce {
            terms.nce += w * l.value;
            grads[i].original.scaled_add(w, &l.grad_a);
            add_back(i, v, l.grad_b * w);
        }
    }
    if !stat.is_empty() {
        let w = 1.0 / stat.len() as f64;
        for (i, v, l) in stat {
            terms.mean += w * l.mean_term;
            terms.var += w * l.var_term;
            grads[i].original.scaled_add(w, &l.grad_a);
            add_back(i, v, l.grad_b * w);
        }
    }
    for (i, v) in pairs {
        if let Some(g) = back_grads[i][v].take() {
            let g_view = images[i].views[v].resampler.apply_transpose(g.view());
            grads[i].views[v] += &g_view;
        }
    }
    Some(terms)
}

fn proto_term(
    level: &LevelEpisode,
    adapted: &[AdaptedImage],
    grads: &mut [AdaptedImage],
    skipped: &mut Vec<SkippedTerm>,
) -> Option<f64> {
    let originals: Vec<_> = adapted.iter().map(|a| a.original.view()).collect();
    let weights: Vec<Vec<Option<f64>>> = level
        .support_masks
        .iter()
        .map(|m| m.iter().map(|&v| Some(v)).collect())
        .collect();
    let protos = masked_prototypes(&originals, &weights);
    let view_count = level.supports.iter().map(|s| s.views.len()).min().unwrap_or(0);
    let mut terms = Vec::new();
    for a in 0..view_count {
        let mut backs = Vec::with_capacity(level.supports.len());
        let mut aug_weights = Vec::with_capacity(level.supports.len());
        for (shot, (img, out)) in level.supports.iter().zip(adapted).enumerate() {
            let r = &img.views[a].resampler;
            backs.push(r.apply(out.views[a].view()));
            aug_weights.push(
                r.valid()
                    .into_iter()
                    .zip(&level.support_masks[shot])
                    .map(|(ok, &m)| ok.then_some(m))
                    .collect::<Vec<_>>(),
            );
        }
        let back_views: Vec<_> = backs.iter().map(|b| b.view()).collect();
        let aug = masked_prototypes(&back_views, &aug_weights);
        match loss_proto(&protos, &aug) {
            Ok(l) => terms.push((a, aug_weights, aug, l)),
            Err(reason) => skipped.push(SkippedTerm::Proto {
                view: a,
                reason: reason.into(),
            }),
        }
    }
    if terms.is_empty() {
        return None;
    }
    let w = 1.0 / terms.len() as f64;
    let mut value = 0.0;
    let mut grad_fg = ndarray::Array1::<f64>::zeros(protos.fg.as_ref().map_or(0, |p| p.len()));
    for (a, aug_weights, aug, l) in terms {
        value += w * l.value;
        grad_fg.scaled_add(w, &l.grad_fg);
        for (shot, img) in level.supports.iter().enumerate() {
            let r = &img.views[a].resampler;
            let mut g_back = Array2::zeros(adapted[shot].original.raw_dim());
            prototype_backward(&(&l.grad_fg_aug * w), &aug_weights[shot], aug.fg_weight, true, &mut g_back);
            prototype_backward(&(&l.grad_bg_aug * w), &aug_weights[shot], aug.bg_weight, false, &mut g_back);
            grads[shot].views[a] += &r.apply_transpose(g_back.view());
        }
    }
    for (shot, g) in grads.iter_mut().enumerate() {
        prototype_backward(&grad_fg, &weights[shot], protos.fg_weight, true, &mut g.original);
    }
    Some(value)
}

/// Evaluates `L = L^q + L^s + L_p` on given head outputs, with gradients
/// with respect to every output matrix.
pub fn combined_loss(level: &LevelEpisode, adapted: &AdaptedLevel, tau: f64) -> Result<CombinedLoss> {
    let mut grads = adapted.zeros_like();
    let mut skipped = Vec::new();
    let query = side_terms(&level.queries, &adapted.queries, &mut grads.queries, tau, false, &mut skipped);
    let support = side_terms(&level.supports, &adapted.supports, &mut grads.supports, tau, true, &mut skipped);
    let proto = proto_term(level, &adapted.supports, &mut grads.supports, &mut skipped);
    if query.is_none() && support.is_none() && proto.is_none() {
        return Err(Error::AllTermsSkipped { level: usize::MAX });
    }
    let query = query.unwrap_or_default();
    let support = support.unwrap_or_default();
    let proto = proto.unwrap_or(0.0);
    Ok(CombinedLoss {
        query,
        support,
        proto,
        total: query.total() + support.total() + proto,
        skipped,
        grads,
    })
}

fn split_side(images: &[ImageLevel], stacked: &Array2<f64>) -> Vec<AdaptedImage> {
    let mut offset = 0;
    let mut take = |vol: &FeatureVolume| {
        let n = vol.positions();
        let m = stacked.slice(s![offset..offset + n, ..]).to_owned();
        offset += n;
        m
    };
    images
        .iter()
        .map(|img| AdaptedImage {
            original: take(&img.original),
            views: img.views.iter().map(|v| take(&v.features)).collect(),
        })
        .collect()
}

fn stack_side(images: &[ImageLevel]) -> Option<Array2<f64>> {
    let views: Vec<_> = images
        .iter()
        .flat_map(|img| std::iter::once(&img.original).chain(img.views.iter().map(|v| &v.features)))
        .map(FeatureVolume::matrix)
        .collect();
    (!views.is_empty()).then(|| concatenate(Axis(0), &views).expect("uniform channel count"))
}

fn stack_outputs(images: &[AdaptedImage]) -> Array2<f64> {
    let views: Vec<_> = images
        .iter()
        .flat_map(|img| std::iter::once(&img.original).chain(&img.views))
        .map(|m| m.view())
        .collect();
    concatenate(Axis(0), &views).expect("uniform channel count")
}

/// Runs every volume of the level through the head. Query-side and
/// support-side volumes form separate batches.
pub fn adapt_level(
    level: &LevelEpisode,
    params: &AdapterParams,
    mode: Mode,
) -> Result<AdaptedLevel> {
    let side = |images: &[ImageLevel]| -> Result<Vec<AdaptedImage>> {
        match stack_side(images) {
            Some(x) => Ok(split_side(images, &params.forward_matrix(x.view(), mode)?)),
            None => Ok(Vec::new()),
        }
    };
    Ok(AdaptedLevel {
        queries: side(&level.queries)?,
        supports: side(&level.supports)?,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LevelFit {
    pub params: AdapterParams,
    pub trace: Vec<f64>,
    pub skipped: Vec<SkippedTerm>,
}

struct Velocity(Option<ParamGrads>);

impl Velocity {
    fn step(&mut self, params: &mut AdapterParams, grads: ParamGrads, lr: f64, momentum: f64) {
        let g = if momentum > 0.0 {
            match &mut self.0 {
                Some(v) => {
                    v.w1 = &v.w1 * momentum + &grads.w1;
                    v.b1 = &v.b1 * momentum + &grads.b1;
                    v.gamma = &v.gamma * momentum + &grads.gamma;
                    v.beta = &v.beta * momentum + &grads.beta;
                    v.w2 = &v.w2 * momentum + &grads.w2;
                    v.b2 = &v.b2 * momentum + &grads.b2;
                    v.clone()
                }
                None => {
                    self.0 = Some(grads.clone());
                    grads
                }
            }
        } else {
            grads
        };
        params.w1.scaled_add(-lr, &g.w1);
        params.b1.scaled_add(-lr, &g.b1);
        params.gamma.scaled_add(-lr, &g.gamma);
        params.beta.scaled_add(-lr, &g.beta);
        params.w2.scaled_add(-lr, &g.w2);
        params.b2.scaled_add(-lr, &g.b2);
    }
}

/// Fits one head from scratch with full-batch gradient descent.
pub fn fit_level(level: &LevelEpisode, index: usize, cfg: &LossConfig, seed: u64) -> Result<LevelFit> {
    cfg.validate()?;
    level.validate()?;
    let mut params = AdapterParams::seeded(level.channels(), cfg.adapter_channels, level_seed(seed, index));
    let query_inputs = stack_side(&level.queries);
    let support_inputs = stack_side(&level.supports).expect("validated support");
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut skipped = Vec::new();
    let mut velocity = Velocity(None);
    for epoch in 0..cfg.epochs {
        let query_pass = query_inputs.as_ref().map(|x| params.forward_fit(x.view())).transpose()?;
        let (support_out, support_cache) = params.forward_fit(support_inputs.view())?;
        let adapted = AdaptedLevel {
            queries: query_pass
                .as_ref()
                .map_or_else(Vec::new, |(out, _)| split_side(&level.queries, out)),
            supports: split_side(&level.supports, &support_out),
        };
        let loss = combined_loss(level, &adapted, cfg.temperature).map_err(|e| match e {
            Error::AllTermsSkipped { .. } => Error::AllTermsSkipped { level: index },
            other => other,
        })?;
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss { level: index, epoch });
        }
        if epoch == 0 {
            for s in &loss.skipped {
                debug!("level {index}: skipped {s:?}");
            }
            skipped = loss.skipped.clone();
        }
        trace.push(loss.total);
        let mut grads = params.backward(&support_cache, stack_outputs(&loss.grads.supports).view());
        if let Some((_, cache)) = &query_pass {
            grads.add(&params.backward(cache, stack_outputs(&loss.grads.queries).view()));
            params.record_batch_stats(cache);
        }
        params.record_batch_stats(&support_cache);
        velocity.step(&mut params, grads, cfg.learning_rate, cfg.momentum);
        if !params.is_finite() {
            return Err(Error::NonFiniteLoss { level: index, epoch });
        }
    }
    Ok(LevelFit {
        params,
        trace,
        skipped,
    })
}

/// Per-level seed derived from the episode seed.
pub fn level_seed(seed: u64, level: usize) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ (level as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fitted heads for every level plus the fitting record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterStack {
    pub params: Vec<AdapterParams>,
    /// Mean combined loss over levels, one entry per epoch.
    pub loss_trace: Vec<f64>,
    pub level_traces: Vec<Vec<f64>>,
    pub skipped: Vec<Vec<SkippedTerm>>,
    pub fit_config: LossConfig,
    pub seed: u64,
}

impl AdapterStack {
    pub fn level_count(&self) -> usize {
        self.params.len()
    }
}

/// Fits all levels independently (in parallel where threads are available).
pub fn fit_adapters(levels: &[LevelEpisode], cfg: &LossConfig, seed: u64) -> Result<AdapterStack> {
    let fits = levels
        .par_iter()
        .enumerate()
        .map(|(l, level)| fit_level(level, l, cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    let loss_trace = (0..cfg.epochs)
        .map(|e| fits.iter().map(|f| f.trace[e]).sum::<f64>() / fits.len().max(1) as f64)
        .collect();
    let mut params = Vec::with_capacity(fits.len());
    let mut level_traces = Vec::with_capacity(fits.len());
    let mut skipped = Vec::with_capacity(fits.len());
    for f in fits {
        params.push(f.params);
        level_traces.push(f.trace);
        skipped.push(f.skipped);
    }
    Ok(AdapterStack {
        params,
        loss_trace,
        level_traces,
        skipped,
        fit_config: *cfg,
        seed,
    })
}
