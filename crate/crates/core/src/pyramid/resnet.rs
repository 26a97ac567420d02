//! 50-layer bottleneck residual network exposing the 13 bottleneck outputs
//! of its last three stages (pre-activation, after the residual sum).
//!
//! Weights are read from a safetensors file using the usual torchvision
//! parameter names (`conv1.weight`, `bn1.running_mean`,
//! `layer2.0.downsample.0.weight`, ...). Batch normalization is folded into
//! the preceding convolution at load time. Without a weights file the
//! network is randomly initialised, which is only useful for shape checks.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::{Dtype, SafeTensors};

use super::conv::{max_pool_3x3_s2, relu, Conv2d};
use super::{Backbone, BackboneSpec, LevelShape, RESNET50_PROVIDER};
use crate::error::{Error, Result};
use crate::features::FeatureVolume;
use crate::grid::RgbImage;

const STAGES: [(usize, usize, usize); 4] = [(3, 64, 1), (4, 128, 2), (6, 256, 2), (3, 512, 2)];
const EXPANSION: usize = 4;
/// Bottlenecks of the first stage are not tapped.
const FIRST_TAP: usize = 3;
const BN_EPS: f64 = 1e-5;
const MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const STD: [f64; 3] = [0.229, 0.224, 0.225];

struct Bottleneck {
    reduce: Conv2d,
    spatial: Conv2d,
    expand: Conv2d,
    downsample: Option<Conv2d>,
}

pub struct ResNet50 {
    spec: BackboneSpec,
    stem: Conv2d,
    blocks: Vec<Bottleneck>,
}

/// Stride and channel count of every tapped bottleneck.
pub(crate) fn tapped_levels() -> Vec<LevelShape> {
    let mut levels = Vec::new();
    let mut stride = 4;
    let mut index = 0;
    for (count, planes, stage_stride) in STAGES {
        stride *= stage_stride;
        for _ in 0..count {
            if index >= FIRST_TAP {
                levels.push(LevelShape {
                    stride,
                    channels: planes * EXPANSION,
                });
            }
            index += 1;
        }
    }
    levels
}

fn resnet_spec() -> BackboneSpec {
    BackboneSpec::new(RESNET50_PROVIDER, tapped_levels(), vec![4, 6, 3])
        .expect("static resnet layout")
}

impl ResNet50 {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Conv2d::random(3, 64, 7, 2, 3, 1.0, &mut rng);
        let mut blocks = Vec::new();
        let mut in_ch = 64;
        for (count, planes, stage_stride) in STAGES {
            for b in 0..count {
                let stride = if b == 0 { stage_stride } else { 1 };
                let out_ch = planes * EXPANSION;
                let downsample = (b == 0)
                    .then(|| Conv2d::random(in_ch, out_ch, 1, stride, 0, 1.0, &mut rng));
                blocks.push(Bottleneck {
                    reduce: Conv2d::random(in_ch, planes, 1, 1, 0, 1.0, &mut rng),
                    spatial: Conv2d::random(planes, planes, 3, stride, 1, 1.0, &mut rng),
                    expand: Conv2d::random(planes, out_ch, 1, 1, 0, 0.2, &mut rng),
                    downsample,
                });
                in_ch = out_ch;
            }
        }
        Self {
            spec: resnet_spec(),
            stem,
            blocks,
        }
    }

    pub fn from_safetensors(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let tensors = SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::ingest(path, format!("invalid safetensors: {e}")))?;
        let loader = Loader { tensors, path };
        let stem = loader.conv_bn("conv1", "bn1", 2, 3)?;
        let mut blocks = Vec::new();
        for (stage, (count, _, stage_stride)) in STAGES.into_iter().enumerate() {
            for b in 0..count {
                let p = format!("layer{}.{b}", stage + 1);
                let stride = if b == 0 { stage_stride } else { 1 };
                let downsample = if b == 0 {
                    Some(loader.conv_bn(
                        &format!("{p}.downsample.0"),
                        &format!("{p}.downsample.1"),
                        stride,
                        0,
                    )?)
                } else {
                    None
                };
                blocks.push(Bottleneck {
                    reduce: loader.conv_bn(&format!("{p}.conv1"), &format!("{p}.bn1"), 1, 0)?,
                    spatial: loader.conv_bn(&format!("{p}.conv2"), &format!("{p}.bn2"), stride, 1)?,
                    expand: loader.conv_bn(&format!("{p}.conv3"), &format!("{p}.bn3"), 1, 0)?,
                    downsample,
                });
            }
        }
        Ok(Self {
            spec: resnet_spec(),
            stem,
            blocks,
        })
    }
}

impl Backbone for ResNet50 {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn forward(&self, image: &RgbImage) -> Result<Vec<FeatureVolume>> {
        let input = FeatureVolume::from_fn(image.height(), image.width(), 3, |y, x, c| {
            (image.get(x, y)[c] / 255.0 - MEAN[c]) / STD[c]
        });
        let mut x = max_pool_3x3_s2(&relu(self.stem.forward(&input)));
        let mut taps = Vec::with_capacity(self.spec.level_count());
        for (index, block) in self.blocks.iter().enumerate() {
            let branch = relu(block.reduce.forward(&x));
            let branch = relu(block.spatial.forward(&branch));
            let mut out = block.expand.forward(&branch);
            let identity = match &block.downsample {
                Some(ds) => ds.forward(&x),
                None => x,
            };
            out.matrix_mut().zip_mut_with(&identity.matrix(), |o, &i| *o += i);
            if index >= FIRST_TAP {
                taps.push(out.clone());
            }
            x = relu(out);
        }
        Ok(taps)
    }
}

struct Loader<'a> {
    tensors: SafeTensors<'a>,
    path: &'a Path,
}

impl Loader<'_> {
    fn read(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let view = self
            .tensors
            .tensor(name)
            .map_err(|_| Error::ingest(self.path, format!("missing tensor `{name}`")))?;
        let data = view.data();
        let values = match view.dtype() {
            Dtype::F32 => data
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect(),
            Dtype::F64 => data
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
            other => {
                return Err(Error::ingest(
                    self.path,
                    format!("tensor `{name}` has unsupported dtype {other:?}"),
                ))
            }
        };
        Ok((view.shape().to_vec(), values))
    }

    fn vector(&self, name: &str, len: usize) -> Result<Array1<f64>> {
        let (shape, values) = self.read(name)?;
        if shape != [len] {
            return Err(Error::ingest(
                self.path,
                format!("tensor `{name}` has shape {shape:?}, expected [{len}]"),
            ));
        }
        Ok(Array1::from_vec(values))
    }

    fn conv_bn(&self, conv: &str, bn: &str, stride: usize, padding: usize) -> Result<Conv2d> {
        let (shape, w) = self.read(&format!("{conv}.weight"))?;
        let [out_ch, in_ch, kh, kw] = shape[..] else {
            return Err(Error::ingest(
                self.path,
                format!("`{conv}.weight` must be 4-D, got {shape:?}"),
            ));
        };
        if kh != kw {
            return Err(Error::ingest(self.path, format!("`{conv}` kernel is not square")));
        }
        let gamma = self.vector(&format!("{bn}.weight"), out_ch)?;
        let beta = self.vector(&format!("{bn}.bias"), out_ch)?;
        let mean = self.vector(&format!("{bn}.running_mean"), out_ch)?;
        let var = self.vector(&format!("{bn}.running_var"), out_ch)?;
        let scale: Array1<f64> = &gamma / &var.mapv(|v| (v + BN_EPS).sqrt());
        let k = kh;
        let mut weight = Array2::<f64>::zeros((k * k * in_ch, out_ch));
        for o in 0..out_ch {
            for c in 0..in_ch {
                for ky in 0..k {
                    for kx in 0..k {
                        let src = ((o * in_ch + c) * k + ky) * k + kx;
                        weight[[(ky * k + kx) * in_ch + c, o]] = w[src] * scale[o];
                    }
                }
            }
        }
        let bias = &beta - &(&mean * &scale);
        Ok(Conv2d {
            kernel: k,
            stride,
            padding,
            in_channels: in_ch,
            weight,
            bias,
        })
    }
}
