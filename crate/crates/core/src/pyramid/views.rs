//! Geometric views of an image and the backprojection of view features
//! into the original image frame.
//!
//! Coordinates are continuous image coordinates: pixel `(x, y)` covers
//! `[x, x + 1) x [y, y + 1)` and has its centre at `(x + 0.5, y + 0.5)`.
//! A feature cell `(i, j)` of a stride-`s` level has its centre at
//! `((j + 0.5) s, (i + 0.5) s)`.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureVolume;
use crate::grid::{Grid, Mask, RgbImage};

const MIN_DET: f64 = 1e-8;

/// Row-major 2x3 affine map `p' = M [x, y, 1]^T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine2(pub [[f64; 3]; 2]);

impl Affine2 {
    pub const IDENTITY: Affine2 = Affine2([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);

    /// Horizontal shear by `angle_deg` about the horizontal line `y = cy`.
    pub fn shear_x(angle_deg: f64, cy: f64) -> Self {
        let t = angle_deg.to_radians().tan();
        Affine2([[1.0, t, -t * cy], [0.0, 1.0, 0.0]])
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.det();
        if det.abs() <= MIN_DET {
            return Err(Error::DegenerateAffine { det });
        }
        let [[a, b, tx], [c, d, ty]] = self.0;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Ok(Affine2([
            [ia, ib, -(ia * tx + ib * ty)],
            [ic, id, -(ic * tx + id * ty)],
        ]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub image: RgbImage,
    pub mask: Option<Mask>,
    /// Maps original coordinates to view coordinates.
    pub affine: Affine2,
    pub shear_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub views: Vec<View>,
    /// Per view, original pixels whose mapped position lies inside the view.
    pub validity: Vec<Mask>,
}

/// Generates `count` independently sheared copies of `image` (and `mask`).
pub fn make_views(
    image: &RgbImage,
    mask: Option<&Mask>,
    count: usize,
    max_shear_deg: f64,
    seed: u64,
) -> Result<ViewSet> {
    if count == 0 {
        return Err(Error::config("view count must be at least 1"));
    }
    if !(max_shear_deg >= 0.0 && max_shear_deg < 90.0) {
        return Err(Error::config(format!(
            "max shear must lie in [0, 90) degrees, got {max_shear_deg}"
        )));
    }
    if let Some(m) = mask {
        if !m.same_dims(image) {
            return Err(Error::shape("view mask does not match image"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cy = image.height() as f64 / 2.0;
    let mut views = Vec::with_capacity(count);
    let mut validity = Vec::with_capacity(count);
    while views.len() < count {
        let shear_deg = if max_shear_deg > 0.0 {
            rng.gen_range(-max_shear_deg..=max_shear_deg)
        } else {
            0.0
        };
        let affine = Affine2::shear_x(shear_deg, cy);
        let Ok(inverse) = affine.inverse() else {
            continue;
        };
        views.push(View {
            image: warp_rgb(image, &inverse),
            mask: mask.map(|m| warp_mask(m, &inverse)),
            affine,
            shear_deg,
        });
        validity.push(frame_validity(image.width(), image.height(), &affine));
    }
    Ok(ViewSet { views, validity })
}

/// Continuous source index and in-range flag for sampling a grid of size `n`
/// at pixel-centre coordinate `c` (cell units).
fn grid_index(c: f64, n: usize) -> Option<(usize, usize, f64)> {
    let pos = c - 0.5;
    if !(pos >= 0.0 && pos <= (n - 1) as f64) {
        return None;
    }
    if n == 1 {
        return Some((0, 0, 0.0));
    }
    let lo = (pos.floor() as usize).min(n - 2);
    Some((lo, lo + 1, pos - lo as f64))
}

fn warp_rgb(image: &RgbImage, inverse: &Affine2) -> RgbImage {
    let (w, h) = image.dims();
    Grid::from_fn(w, h, |x, y| {
        let (sx, sy) = inverse.apply(x as f64 + 0.5, y as f64 + 0.5);
        match (grid_index(sx, w), grid_index(sy, h)) {
            (Some((x0, x1, tx)), Some((y0, y1, ty))) => {
                let mut out = [0.0; 3];
                for (c, o) in out.iter_mut().enumerate() {
                    let top = image.get(x0, y0)[c] * (1.0 - tx) + image.get(x1, y0)[c] * tx;
                    let bottom = image.get(x0, y1)[c] * (1.0 - tx) + image.get(x1, y1)[c] * tx;
                    *o = top * (1.0 - ty) + bottom * ty;
                }
                out
            }
            _ => [0.0; 3],
        }
    })
}

fn warp_mask(mask: &Mask, inverse: &Affine2) -> Mask {
    let (w, h) = mask.dims();
    Grid::from_fn(w, h, |x, y| {
        let (sx, sy) = inverse.apply(x as f64 + 0.5, y as f64 + 0.5);
        let (ix, iy) = (sx.floor(), sy.floor());
        ix >= 0.0 && iy >= 0.0 && ix < w as f64 && iy < h as f64 && *mask.get(ix as usize, iy as usize)
    })
}

fn frame_validity(w: usize, h: usize, affine: &Affine2) -> Mask {
    Grid::from_fn(w, h, |x, y| {
        let (vx, vy) = affine.apply(x as f64 + 0.5, y as f64 + 0.5);
        vx >= 0.0 && vy >= 0.0 && vx < w as f64 && vy < h as f64
    })
}

/// Sparse bilinear resampling operator between two feature grids.
///
/// Output position `p` reads four weighted input taps, or nothing when any
/// tap would fall outside the input grid. Keeps the transpose available for
/// gradient propagation.
#[derive(Debug, Clone)]
pub struct Resampler {
    src_positions: usize,
    taps: Vec<Option<[(usize, f64); 4]>>,
}

impl Resampler {
    /// Resampler taking view features (stride `stride`, `h x w` cells) back
    /// to the original frame, where `affine` maps original to view.
    pub fn backprojection(affine: &Affine2, stride: usize, h: usize, w: usize) -> Result<Self> {
        let det = affine.det();
        if det.abs() <= MIN_DET {
            return Err(Error::DegenerateAffine { det });
        }
        let s = stride as f64;
        let mut taps = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let (vx, vy) = affine.apply((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
                taps.push(
                    match (grid_index(vx / s, w), grid_index(vy / s, h)) {
                        (Some((x0, x1, tx)), Some((y0, y1, ty))) => Some([
                            (y0 * w + x0, (1.0 - tx) * (1.0 - ty)),
                            (y0 * w + x1, tx * (1.0 - ty)),
                            (y1 * w + x0, (1.0 - tx) * ty),
                            (y1 * w + x1, tx * ty),
                        ]),
                        _ => None,
                    },
                );
            }
        }
        Ok(Self {
            src_positions: h * w,
            taps,
        })
    }

    pub fn valid(&self) -> Vec<bool> {
        self.taps.iter().map(Option::is_some).collect()
    }

    /// Resamples `src` rows; rows without a valid source are zero.
    pub fn apply(&self, src: ArrayView2<'_, f64>) -> Array2<f64> {
        assert_eq!(src.nrows(), self.src_positions, "resampler source size");
        let mut out = Array2::<f64>::zeros((self.taps.len(), src.ncols()));
        for (p, taps) in self.taps.iter().enumerate() {
            if let Some(taps) = taps {
                let mut row = out.row_mut(p);
                for &(q, weight) in taps {
                    row.scaled_add(weight, &src.row(q));
                }
            }
        }
        out
    }

    /// Adjoint of [`Resampler::apply`].
    pub fn apply_transpose(&self, grad: ArrayView2<'_, f64>) -> Array2<f64> {
        assert_eq!(grad.nrows(), self.taps.len(), "resampler target size");
        let mut out = Array2::<f64>::zeros((self.src_positions, grad.ncols()));
        for (p, taps) in self.taps.iter().enumerate() {
            if let Some(taps) = taps {
                for &(q, weight) in taps {
                    out.row_mut(q).scaled_add(weight, &grad.row(p));
                }
            }
        }
        out
    }
}

/// Resamples view features at `stride` into the original frame. Returns the
/// backprojected volume and its validity map; invalid rows are zero.
pub fn backproject(
    features: &FeatureVolume,
    affine: &Affine2,
    stride: usize,
) -> Result<(FeatureVolume, Vec<bool>)> {
    let (h, w, _) = features.shape();
    let resampler = Resampler::backprojection(affine, stride, h, w)?;
    let out = resampler.apply(features.matrix());
    Ok((FeatureVolume::new(h, w, out)?, resampler.valid()))
}

/// Forward-warps original-frame features into the view frame (the inverse
/// operation of [`backproject`]). Returns the view volume and the cells
/// whose source taps were all inside the original grid.
pub fn warp_volume(
    features: &FeatureVolume,
    affine: &Affine2,
    stride: usize,
) -> Result<(FeatureVolume, Vec<bool>)> {
    let inverse = affine.inverse()?;
    backproject(features, &inverse, stride)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_image(w: usize, h: usize) -> RgbImage {
        Grid::from_fn(w, h, |x, y| [x as f64 * 3.0, y as f64 * 5.0, 100.0])
    }

    #[test]
    fn zero_shear_gives_identity_views() {
        let img = ramp_image(16, 12);
        let mask = Grid::from_fn(16, 12, |x, _| x < 6);
        let set = make_views(&img, Some(&mask), 3, 0.0, 9).unwrap();
        assert_eq!(set.views.len(), 3);
        for (view, valid) in set.views.iter().zip(&set.validity) {
            assert_eq!(view.affine, Affine2::IDENTITY);
            assert_eq!(view.image, img);
            assert_eq!(view.mask.as_ref(), Some(&mask));
            assert_eq!(valid.count(), valid.len());
        }
    }

    #[test]
    fn views_are_reproducible() {
        let img = ramp_image(16, 16);
        let a = make_views(&img, None, 2, 20.0, 7).unwrap();
        let b = make_views(&img, None, 2, 20.0, 7).unwrap();
        assert_eq!(a, b);
        let c = make_views(&img, None, 2, 20.0, 8).unwrap();
        assert_ne!(a.views[0].shear_deg, c.views[0].shear_deg);
    }

    #[test]
    fn sampled_angles_respect_bound() {
        let img = ramp_image(8, 8);
        let set = make_views(&img, None, 2, 20.0, 1).unwrap();
        for v in &set.views {
            assert!(v.shear_deg.abs() <= 20.0, "{}", v.shear_deg);
        }
        let many = make_views(&img, None, 200, 20.0, 2).unwrap();
        assert!(many.views.iter().all(|v| v.shear_deg.abs() <= 20.0));
        assert!(many.views.iter().any(|v| v.shear_deg.abs() > 15.0));
    }

    #[test]
    fn invalid_arguments() {
        let img = ramp_image(8, 8);
        assert!(make_views(&img, None, 0, 20.0, 1).is_err());
        assert!(make_views(&img, None, 1, -1.0, 1).is_err());
    }

    #[test]
    fn degenerate_affine_is_rejected() {
        let singular = Affine2([[1.0, 2.0, 0.0], [0.5, 1.0, 0.0]]);
        let vol = FeatureVolume::from_fn(4, 4, 2, |y, x, _| (x + y) as f64);
        assert!(matches!(
            backproject(&vol, &singular, 2),
            Err(Error::DegenerateAffine { .. })
        ));
        assert!(singular.inverse().is_err());
    }

    #[test]
    fn identity_backprojection_is_exact() {
        let vol = FeatureVolume::from_fn(5, 7, 3, |y, x, c| (y * 31 + x * 7 + c) as f64 * 0.37 - 4.0);
        let (out, valid) = backproject(&vol, &Affine2::IDENTITY, 4).unwrap();
        assert_eq!(out, vol);
        assert!(valid.iter().all(|&v| v));
    }

    #[test]
    fn inverse_composes_to_identity() {
        let a = Affine2::shear_x(17.0, 8.0);
        let inv = a.inverse().unwrap();
        let (x, y) = a.apply(3.25, 11.5);
        let (bx, by) = inv.apply(x, y);
        assert!((bx - 3.25).abs() < 1e-12 && (by - 11.5).abs() < 1e-12);
    }

    #[test]
    fn out_of_frame_positions_are_flagged() {
        let affine = Affine2([[1.0, 0.0, 40.0], [0.0, 1.0, 0.0]]);
        let vol = FeatureVolume::from_fn(4, 4, 1, |_, _, _| 1.0);
        let (_, valid) = backproject(&vol, &affine, 8).unwrap();
        // 40 px is 5 cells at stride 8: the whole 4-wide grid falls outside.
        assert!(valid.iter().all(|&v| !v));
    }

    #[test]
    fn transpose_is_adjoint() {
        let affine = Affine2::shear_x(13.0, 16.0);
        let r = Resampler::backprojection(&affine, 4, 8, 8).unwrap();
        let x = Array2::from_shape_fn((64, 3), |(i, c)| ((i * 7 + c * 13) % 17) as f64 - 8.0);
        let y = Array2::from_shape_fn((64, 3), |(i, c)| ((i * 5 + c * 3) % 11) as f64 - 5.0);
        let lhs = (&r.apply(x.view()) * &y).sum();
        let rhs = (&x * &r.apply_transpose(y.view())).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn ramp_round_trip(angle in -20.0f64..20.0, stride in prop::sample::select(vec![1usize, 2, 4, 8]),
                           ax in -2.0f64..2.0, ay in -2.0f64..2.0, b in -3.0f64..3.0) {
            let (h, w) = (12, 12);
            let vol = FeatureVolume::from_fn(h, w, 2, |y, x, c| {
                if c == 0 { ax * x as f64 + ay * y as f64 + b } else { b - ay * x as f64 }
            });
            let affine = Affine2::shear_x(angle, (h * stride) as f64 / 2.0);
            let (warped, warped_valid) = warp_volume(&vol, &affine, stride).unwrap();
            let r = Resampler::backprojection(&affine, stride, h, w).unwrap();
            let back = r.apply(warped.matrix());
            for (p, taps) in r.taps.iter().enumerate() {
                let Some(taps) = taps else { continue };
                if taps.iter().any(|&(q, wt)| wt > 0.0 && !warped_valid[q]) {
                    continue;
                }
                for c in 0..2 {
                    prop_assert!((back[[p, c]] - vol.matrix()[[p, c]]).abs() < 1e-5);
                }
            }
        }

        #[test]
        fn valid_positions_have_taps_inside(angle in -20.0f64..20.0, stride in 1usize..9) {
            let (h, w) = (9, 11);
            let affine = Affine2::shear_x(angle, (h * stride) as f64 / 2.0);
            let r = Resampler::backprojection(&affine, stride, h, w).unwrap();
            for taps in r.taps.iter().flatten() {
                for &(q, _) in taps {
                    prop_assert!(q < h * w);
                }
            }
            // Positions mapping outside the grid are never valid.
            let s = stride as f64;
            for (p, taps) in r.taps.iter().enumerate() {
                let (i, j) = (p / w, p % w);
                let (vx, vy) = affine.apply((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
                let inside = vx / s - 0.5 >= 0.0 && vx / s - 0.5 <= (w - 1) as f64
                    && vy / s - 0.5 >= 0.0 && vy / s - 0.5 <= (h - 1) as f64;
                prop_assert_eq!(taps.is_some(), inside);
            }
        }
    }
}
