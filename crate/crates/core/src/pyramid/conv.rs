//! Minimal convolution primitives (im2col + matrix product) for the
//! built-in providers.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::features::FeatureVolume;

#[derive(Debug, Clone)]
pub(crate) struct Conv2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    /// `(kernel * kernel * in_channels) x out_channels`, rows ordered `(ky, kx, c)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Conv2d {
    /// He-normal weights scaled by `gain`, zero bias.
    pub fn random(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = kernel * kernel * in_channels;
        let std = gain * (2.0 / fan_in as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((fan_in, out_channels), || {
            std * rng.sample::<f64, _>(StandardNormal)
        });
        Self {
            kernel,
            stride,
            padding,
            in_channels,
            weight,
            bias: Array1::zeros(out_channels),
        }
    }

    #[cfg(test)]
    pub fn out_channels(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dims(&self, height: usize, width: usize) -> (usize, usize) {
        let oh = (height + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (width + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    pub fn forward(&self, input: &FeatureVolume) -> FeatureVolume {
        debug_assert_eq!(input.channels(), self.in_channels);
        let (h, w) = (input.height(), input.width());
        let (oh, ow) = self.output_dims(h, w);
        let mut out = if self.kernel == 1 && self.stride == 1 && self.padding == 0 {
            input.matrix().dot(&self.weight)
        } else {
            self.im2col(input, oh, ow).dot(&self.weight)
        };
        out += &self.bias;
        FeatureVolume::new(oh, ow, out).expect("conv output shape")
    }

    fn im2col(&self, input: &FeatureVolume, oh: usize, ow: usize) -> Array2<f64> {
        let (h, w, c) = input.shape();
        let k = self.kernel;
        let src = input.matrix();
        let mut cols = Array2::<f64>::zeros((oh * ow, k * k * c));
        for oy in 0..oh {
            for ox in 0..ow {
                let mut row = cols.row_mut(oy * ow + ox);
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let base = (ky * k + kx) * c;
                        let pixel = src.row(iy as usize * w + ix as usize);
                        row.slice_mut(ndarray::s![base..base + c]).assign(&pixel);
                    }
                }
            }
        }
        cols
    }
}

pub(crate) fn relu(mut vol: FeatureVolume) -> FeatureVolume {
    vol.matrix_mut().mapv_inplace(|v| v.max(0.0));
    vol
}

/// Non-overlapping `factor x factor` mean pooling.
pub(crate) fn avg_pool(input: &FeatureVolume, factor: usize) -> FeatureVolume {
    if factor == 1 {
        return input.clone();
    }
    let (h, w, c) = input.shape();
    let (oh, ow) = (h / factor, w / factor);
    let src = input.matrix();
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = Array2::<f64>::zeros((oh * ow, c));
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = out.row_mut(oy * ow + ox);
            for dy in 0..factor {
                for dx in 0..factor {
                    acc += &src.row((oy * factor + dy) * w + ox * factor + dx);
                }
            }
            acc *= norm;
        }
    }
    FeatureVolume::new(oh, ow, out).expect("pool output shape")
}

/// 3x3 max pooling, stride 2, padding 1.
pub(crate) fn max_pool_3x3_s2(input: &FeatureVolume) -> FeatureVolume {
    let (h, w, c) = input.shape();
    let (oh, ow) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
    let src = input.matrix();
    let mut out = Array2::<f64>::from_elem((oh * ow, c), f64::NEG_INFINITY);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = out.row_mut(oy * ow + ox);
            for ky in 0..3 {
                let iy = (oy * 2 + ky) as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * 2 + kx) as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let pixel = src.row(iy as usize * w + ix as usize);
                    acc.zip_mut_with(&pixel, |a, &b| *a = a.max(b));
                }
            }
        }
    }
    FeatureVolume::new(oh, ow, out).expect("pool output shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(conv: &Conv2d, input: &FeatureVolume) -> FeatureVolume {
        let (h, w, c) = input.shape();
        let (oh, ow) = conv.output_dims(h, w);
        let k = conv.kernel;
        FeatureVolume::from_fn(oh, ow, conv.out_channels(), |oy, ox, o| {
            let mut acc = conv.bias[o];
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                    let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    for ci in 0..c {
                        acc += conv.weight[[(ky * k + kx) * c + ci, o]]
                            * input.at(iy as usize, ix as usize)[ci];
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = FeatureVolume::from_fn(7, 9, 3, |y, x, c| ((y * 13 + x * 7 + c * 3) % 11) as f64 - 5.0);
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (7, 2, 3), (1, 2, 0), (1, 1, 0)] {
            let mut conv = Conv2d::random(3, 5, k, s, p, 1.0, &mut rng);
            conv.bias = Array1::from_vec(vec![0.1, -0.2, 0.3, 0.0, 1.0]);
            let fast = conv.forward(&input);
            let slow = naive_conv(&conv, &input);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.matrix().iter().zip(slow.matrix().iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooling_shapes() {
        let input = FeatureVolume::from_fn(8, 8, 2, |y, x, _| (y * 8 + x) as f64);
        let avg = avg_pool(&input, 2);
        assert_eq!(avg.shape(), (4, 4, 2));
        assert_eq!(avg.at(0, 0)[0], (0.0 + 1.0 + 8.0 + 9.0) / 4.0);
        let max = max_pool_3x3_s2(&input);
        assert_eq!(max.shape(), (4, 4, 2));
        assert_eq!(max.at(0, 0)[0], 9.0);
    }
}
