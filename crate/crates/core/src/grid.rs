//! Dense row-major 2-D rasters used for images, masks and score maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major raster; element `(x, y)` lives at `y * width + x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// Real-valued per-pixel foreground score.
pub type ScoreMap = Grid<f64>;
/// Binary mask, `true` is foreground.
pub type Mask = Grid<bool>;
/// RGB image with channel values on the 0..=255 scale.
pub type RgbImage = Grid<[f64; 3]>;

impl<T> Grid<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape(format!("empty raster {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::shape(format!(
                "raster {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(width > 0 && height > 0, "empty raster");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn same_dims<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }
}

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        assert!(width > 0 && height > 0, "empty raster");
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl Grid<f64> {
    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

impl Grid<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn to_scores(&self) -> ScoreMap {
        self.map(|&v| if v { 1.0 } else { 0.0 })
    }
}

/// Source coordinate and interpolation weight along one axis for
/// half-pixel-centred resampling (pixel `i` of an `n`-wide raster has its
/// centre at `(i + 0.5) / n`).
#[derive(Debug, Clone, Copy)]
pub(crate) struct AxisTap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub(crate) fn axis_taps(src: usize, dst: usize) -> Vec<AxisTap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            AxisTap {
                lo,
                hi,
                frac: pos - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resize with half-pixel-centred sample grid; border samples clamp.
pub fn resize_bilinear(map: &ScoreMap, width: usize, height: usize) -> ScoreMap {
    if map.dims() == (width, height) {
        return map.clone();
    }
    let xs = axis_taps(map.width(), width);
    let ys = axis_taps(map.height(), height);
    Grid::from_fn(width, height, |x, y| {
        let (tx, ty) = (xs[x], ys[y]);
        let top = lerp(*map.get(tx.lo, ty.lo), *map.get(tx.hi, ty.lo), tx.frac);
        let bottom = lerp(*map.get(tx.lo, ty.hi), *map.get(tx.hi, ty.hi), tx.frac);
        lerp(top, bottom, ty.frac)
    })
}

/// Bilinear resize of an RGB image on the same sample grid as [`resize_bilinear`].
pub fn resize_rgb(image: &RgbImage, width: usize, height: usize) -> RgbImage {
    if image.dims() == (width, height) {
        return image.clone();
    }
    let xs = axis_taps(image.width(), width);
    let ys = axis_taps(image.height(), height);
    Grid::from_fn(width, height, |x, y| {
        let (tx, ty) = (xs[x], ys[y]);
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let top = lerp(image.get(tx.lo, ty.lo)[c], image.get(tx.hi, ty.lo)[c], tx.frac);
            let bottom = lerp(image.get(tx.lo, ty.hi)[c], image.get(tx.hi, ty.hi)[c], tx.frac);
            *o = lerp(top, bottom, ty.frac);
        }
        out
    })
}

/// Nearest-neighbour resize for binary masks.
pub fn resize_nearest(mask: &Mask, width: usize, height: usize) -> Mask {
    if mask.dims() == (width, height) {
        return mask.clone();
    }
    let sx = mask.width() as f64 / width as f64;
    let sy = mask.height() as f64 / height as f64;
    Grid::from_fn(width, height, |x, y| {
        let src_x = (((x as f64 + 0.5) * sx) as usize).min(mask.width() - 1);
        let src_y = (((y as f64 + 0.5) * sy) as usize).min(mask.height() - 1);
        *mask.get(src_x, src_y)
    })
}

#[inline]
pub(crate) fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}
