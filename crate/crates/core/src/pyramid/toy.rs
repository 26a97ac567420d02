//! Weight-free deterministic provider: seeded random convolutions with
//! average-pool downsampling between levels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::conv::{avg_pool, relu, Conv2d};
use super::{Backbone, BackboneSpec, LevelShape, TOY_PROVIDER};
use crate::error::{Error, Result};
use crate::features::FeatureVolume;
use crate::grid::RgbImage;

struct ToyLevel {
    /// 3x3 filter bank applied at the previous level's resolution.
    texture: Conv2d,
    pool: usize,
    /// 1x1 mixing after pooling; its output is the level tap.
    mix: Conv2d,
}

pub struct ToyBackbone {
    spec: BackboneSpec,
    levels: Vec<ToyLevel>,
}

impl ToyBackbone {
    pub fn default_levels() -> Vec<LevelShape> {
        vec![
            LevelShape { stride: 2, channels: 16 },
            LevelShape { stride: 4, channels: 32 },
            LevelShape { stride: 8, channels: 64 },
        ]
    }

    pub fn new(level_shapes: Vec<LevelShape>, seed: u64) -> Result<Self> {
        let blocks = vec![1; level_shapes.len()];
        let spec = BackboneSpec::new(TOY_PROVIDER, level_shapes, blocks)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut levels = Vec::with_capacity(spec.level_count());
        let mut prev_stride = 1;
        let mut prev_channels = 3;
        for shape in &spec.level_shapes {
            if shape.stride % prev_stride != 0 {
                return Err(Error::config(format!(
                    "toy strides must divide each other ({} after {prev_stride})",
                    shape.stride
                )));
            }
            let texture = Conv2d::random(prev_channels, shape.channels, 3, 1, 1, 1.0, &mut rng);
            let mix = Conv2d::random(shape.channels, shape.channels, 1, 1, 0, 0.5, &mut rng);
            levels.push(ToyLevel {
                texture,
                pool: shape.stride / prev_stride,
                mix,
            });
            prev_stride = shape.stride;
            prev_channels = shape.channels;
        }
        Ok(Self { spec, levels })
    }
}

impl Backbone for ToyBackbone {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn forward(&self, image: &RgbImage) -> Result<Vec<FeatureVolume>> {
        let mut x = FeatureVolume::from_fn(image.height(), image.width(), 3, |y, x, c| {
            image.get(x, y)[c] / 127.5 - 1.0
        });
        let mut taps = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            let textured = relu(level.texture.forward(&x));
            let tap = level.mix.forward(&avg_pool(&textured, level.pool));
            x = relu(tap.clone());
            taps.push(tap);
        }
        Ok(taps)
    }
}
