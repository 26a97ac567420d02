//! Multi-level feature extraction, geometric views and mask pyramids.
//!
//! A [`Backbone`] turns an RGB image into `L` ordered feature volumes. Level
//! `l` has spatial size `(H / stride_l, W / stride_l)`; strides never
//! decrease with the level index.

mod conv;
mod resnet;
mod toy;
mod views;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureVolume;
use crate::grid::{resize_bilinear, Mask, RgbImage, ScoreMap};

pub use resnet::ResNet50;
pub use toy::ToyBackbone;
pub use views::{backproject, make_views, warp_volume, Affine2, Resampler, View, ViewSet};

pub const TOY_PROVIDER: &str = "toy";
pub const RESNET50_PROVIDER: &str = "resnet50";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelShape {
    pub stride: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub provider_id: String,
    pub level_shapes: Vec<LevelShape>,
    /// Consecutive level counts forming the low/middle/high blocks.
    pub blocks: Vec<usize>,
}

impl BackboneSpec {
    pub fn new(
        provider_id: impl Into<String>,
        level_shapes: Vec<LevelShape>,
        blocks: Vec<usize>,
    ) -> Result<Self> {
        let spec = Self {
            provider_id: provider_id.into(),
            level_shapes,
            blocks,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn level_count(&self) -> usize {
        self.level_shapes.len()
    }

    pub fn max_stride(&self) -> usize {
        self.level_shapes.iter().map(|s| s.stride).max().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.level_shapes.is_empty() {
            return Err(Error::config("backbone must expose at least one level"));
        }
        if self
            .level_shapes
            .iter()
            .any(|s| s.stride == 0 || s.channels == 0)
        {
            return Err(Error::config("strides and channel counts must be positive"));
        }
        if self
            .level_shapes
            .windows(2)
            .any(|w| w[1].stride < w[0].stride)
        {
            return Err(Error::config("strides must be non-decreasing"));
        }
        if self.blocks.iter().sum::<usize>() != self.level_count() {
            return Err(Error::config(format!(
                "block split {:?} does not cover {} levels",
                self.blocks,
                self.level_count()
            )));
        }
        Ok(())
    }

    /// Spatial `(height, width)` of every level for a `width x height` input.
    pub fn level_dims(&self, width: usize, height: usize) -> Result<Vec<(usize, usize)>> {
        let stride = self.max_stride();
        if width % stride != 0 || height % stride != 0 {
            return Err(Error::config(format!(
                "input {width}x{height} is not divisible by the largest stride {stride}"
            )));
        }
        Ok(self
            .level_shapes
            .iter()
            .map(|s| (height / s.stride, width / s.stride))
            .collect())
    }
}

/// A frozen feature extractor returning one volume per level.
pub trait Backbone: Send + Sync {
    fn spec(&self) -> &BackboneSpec;

    fn forward(&self, image: &RgbImage) -> Result<Vec<FeatureVolume>>;

    /// Whether `forward` may run concurrently from several threads.
    fn is_reentrant(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureVolume>,
}

impl FeaturePyramid {
    pub fn level_count(&self) -> usize {
        self.levels.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPyramid {
    pub levels: Vec<ScoreMap>,
}

/// Options for constructing a provider by id.
#[derive(Debug, Clone, Default)]
pub struct ProviderOptions {
    pub seed: u64,
    pub weights: Option<PathBuf>,
    /// Level layout for the toy provider; its default layout when absent.
    pub toy_levels: Option<Vec<LevelShape>>,
}

pub fn create_backbone(provider_id: &str, options: &ProviderOptions) -> Result<Arc<dyn Backbone>> {
    match provider_id {
        TOY_PROVIDER => {
            let levels = options
                .toy_levels
                .clone()
                .unwrap_or_else(ToyBackbone::default_levels);
            Ok(Arc::new(ToyBackbone::new(levels, options.seed)?))
        }
        RESNET50_PROVIDER => {
            let net = match &options.weights {
                Some(path) => ResNet50::from_safetensors(path)?,
                None => ResNet50::random(options.seed),
            };
            Ok(Arc::new(net))
        }
        other => Err(Error::UnknownProvider(other.to_string())),
    }
}

/// Runs the backbone and checks the result against its declared layout.
pub fn extract_pyramid(image: &RgbImage, backbone: &dyn Backbone) -> Result<FeaturePyramid> {
    let spec = backbone.spec();
    let dims = spec.level_dims(image.width(), image.height())?;
    let levels = backbone.forward(image)?;
    if levels.len() != spec.level_count() {
        return Err(Error::config(format!(
            "provider returned {} levels, spec declares {}",
            levels.len(),
            spec.level_count()
        )));
    }
    for (l, (vol, (&(h, w), shape))) in levels
        .iter()
        .zip(dims.iter().zip(&spec.level_shapes))
        .enumerate()
    {
        if vol.shape() != (h, w, shape.channels) {
            return Err(Error::config(format!(
                "level {l}: provider produced {:?}, expected {:?}",
                vol.shape(),
                (h, w, shape.channels)
            )));
        }
        if !vol.is_finite() {
            return Err(Error::config(format!("level {l}: non-finite features")));
        }
    }
    Ok(FeaturePyramid { levels })
}

/// Bilinearly downsamples a binary mask to every level's spatial size.
pub fn downsample_mask(mask: &Mask, spec: &BackboneSpec) -> Result<MaskPyramid> {
    let dims = spec.level_dims(mask.width(), mask.height())?;
    let scores = mask.to_scores();
    let levels = dims
        .into_iter()
        .map(|(h, w)| resize_bilinear(&scores, w, h))
        .collect();
    Ok(MaskPyramid { levels })
}
