//! Permutohedral lattice for fast high-dimensional Gaussian filtering.

use std::collections::HashMap;

const MAX_DIM: usize = 8;

type Key = [i32; MAX_DIM];

/// Splat/blur/slice structure built once per feature set.
#[derive(Debug, Clone)]
pub struct Lattice {
    dim: usize,
    points: usize,
    vertices: usize,
    /// Per point, `dim + 1` enclosing vertex indices.
    offsets: Vec<usize>,
    /// Per point, `dim + 1` barycentric weights.
    weights: Vec<f64>,
    /// Per axis and vertex, the two neighbour indices (or `None`).
    neighbours: Vec<(Option<usize>, Option<usize>)>,
}

impl Lattice {
    /// `features` is `points x dim`, row-major, already scaled by the
    /// inverse standard deviations.
    pub fn new(features: &[f64], dim: usize) -> Self {
        assert!(dim >= 1 && dim < MAX_DIM, "unsupported feature dimension {dim}");
        assert_eq!(features.len() % dim, 0);
        let points = features.len() / dim;
        let d = dim;
        let d1 = d + 1;
        let inv_std = (2.0f64 / 3.0).sqrt() * d1 as f64;
        let scale: Vec<f64> = (0..d)
            .map(|i| inv_std / (((i + 1) * (i + 2)) as f64).sqrt())
            .collect();
        let canonical = canonical_simplex(d);

        let mut table: HashMap<Key, usize> = HashMap::new();
        let mut keys: Vec<Key> = Vec::new();
        let mut offsets = vec![0usize; points * d1];
        let mut weights = vec![0.0; points * d1];

        let mut elevated = vec![0.0; d1];
        let mut rem0 = vec![0i32; d1];
        let mut rank = vec![0i32; d1];
        let mut bary = vec![0.0; d1 + 1];
        for k in 0..points {
            let f = &features[k * d..(k + 1) * d];
            let mut sm = 0.0;
            for j in (1..=d).rev() {
                let cf = f[j - 1] * scale[j - 1];
                elevated[j] = sm - j as f64 * cf;
                sm += cf;
            }
            elevated[0] = sm;

            let mut sum = 0i32;
            for i in 0..d1 {
                let v = elevated[i] / d1 as f64;
                let up = v.ceil() as i32 * d1 as i32;
                let down = v.floor() as i32 * d1 as i32;
                rem0[i] = if up as f64 - elevated[i] < elevated[i] - down as f64 { up } else { down };
                sum += rem0[i];
            }
            let sum = sum / d1 as i32;

            rank.iter_mut().for_each(|r| *r = 0);
            for i in 0..d {
                let di = elevated[i] - rem0[i] as f64;
                for j in i + 1..d1 {
                    if di < elevated[j] - rem0[j] as f64 {
                        rank[i] += 1;
                    } else {
                        rank[j] += 1;
                    }
                }
            }
            for i in 0..d1 {
                rank[i] += sum;
                if rank[i] < 0 {
                    rank[i] += d1 as i32;
                    rem0[i] += d1 as i32;
                } else if rank[i] > d as i32 {
                    rank[i] -= d1 as i32;
                    rem0[i] -= d1 as i32;
                }
            }

            bary.iter_mut().for_each(|b| *b = 0.0);
            for i in 0..d1 {
                let v = (elevated[i] - rem0[i] as f64) / d1 as f64;
                let r = rank[i] as usize;
                bary[d - r] += v;
                bary[d - r + 1] -= v;
            }
            bary[0] += 1.0 + bary[d1];

            for remainder in 0..d1 {
                let mut key: Key = [0; MAX_DIM];
                for i in 0..d {
                    key[i] = rem0[i] + canonical[remainder * d1 + rank[i] as usize];
                }
                let index = *table.entry(key).or_insert_with(|| {
                    keys.push(key);
                    keys.len() - 1
                });
                offsets[k * d1 + remainder] = index;
                weights[k * d1 + remainder] = bary[remainder];
            }
        }

        let vertices = keys.len();
        let mut neighbours = Vec::with_capacity(d1 * vertices);
        for j in 0..d1 {
            for key in &keys {
                let mut n1: Key = [0; MAX_DIM];
                let mut n2: Key = [0; MAX_DIM];
                for i in 0..d {
                    n1[i] = key[i] - 1;
                    n2[i] = key[i] + 1;
                }
                if j < d {
                    n1[j] = key[j] + d as i32;
                    n2[j] = key[j] - d as i32;
                }
                neighbours.push((table.get(&n1).copied(), table.get(&n2).copied()));
            }
        }

        Self { dim, points, vertices, offsets, weights, neighbours }
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn vertices(&self) -> usize {
        self.vertices
    }

    /// Approximate Gaussian filter of `values` (`points x channels`, row-major),
    /// self term included.
    pub fn filter(&self, values: &[f64], channels: usize) -> Vec<f64> {
        assert_eq!(values.len(), self.points * channels);
        let d1 = self.dim + 1;
        let mut lattice = vec![0.0; self.vertices * channels];
        for k in 0..self.points {
            let v = &values[k * channels..(k + 1) * channels];
            for r in 0..d1 {
                let o = self.offsets[k * d1 + r] * channels;
                let w = self.weights[k * d1 + r];
                for c in 0..channels {
                    lattice[o + c] += w * v[c];
                }
            }
        }

        let mut next = vec![0.0; lattice.len()];
        for j in 0..d1 {
            for i in 0..self.vertices {
                let (n1, n2) = self.neighbours[j * self.vertices + i];
                for c in 0..channels {
                    let a = n1.map_or(0.0, |n| lattice[n * channels + c]);
                    let b = n2.map_or(0.0, |n| lattice[n * channels + c]);
                    next[i * channels + c] = lattice[i * channels + c] + 0.5 * (a + b);
                }
            }
            std::mem::swap(&mut lattice, &mut next);
        }

        let alpha = 1.0 / (1.0 + 2f64.powi(-(self.dim as i32)));
        let mut out = vec![0.0; values.len()];
        for k in 0..self.points {
            for r in 0..d1 {
                let o = self.offsets[k * d1 + r] * channels;
                let w = self.weights[k * d1 + r] * alpha;
                for c in 0..channels {
                    out[k * channels + c] += w * lattice[o + c];
                }
            }
        }
        out
    }
}

fn canonical_simplex(d: usize) -> Vec<i32> {
    let d1 = d + 1;
    let mut canonical = vec![0i32; d1 * d1];
    for i in 0..d1 {
        for j in 0..d1 - i {
            canonical[i * d1 + j] = i as i32;
        }
        for j in d1 - i..d1 {
            canonical[i * d1 + j] = i as i32 - d1 as i32;
        }
    }
    canonical
}

/// Exact `sum_j exp(-|f_i - f_j|^2 / 2) v_j`, quadratic in the point count.
pub fn exact_filter(features: &[f64], dim: usize, values: &[f64], channels: usize) -> Vec<f64> {
    let points = features.len() / dim;
    assert_eq!(values.len(), points * channels);
    let mut out = vec![0.0; values.len()];
    for i in 0..points {
        let fi = &features[i * dim..(i + 1) * dim];
        for j in 0..points {
            let fj = &features[j * dim..(j + 1) * dim];
            let dist2: f64 = fi.iter().zip(fj).map(|(a, b)| (a - b) * (a - b)).sum();
            let k = (-0.5 * dist2).exp();
            for c in 0..channels {
                out[i * channels + c] += k * values[j * channels + c];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn normalized(raw: &[f64], ones: &[f64]) -> Vec<f64> {
        raw.iter().zip(ones).map(|(r, n)| r / n).collect()
    }

    #[test]
    fn single_point_keeps_its_value_up_to_scale() {
        let lattice = Lattice::new(&[0.3, -1.2], 2);
        let out = lattice.filter(&[2.0], 1);
        assert!(out[0] > 0.0);
        let ones = lattice.filter(&[1.0], 1);
        assert!((out[0] / ones[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn normalized_filter_tracks_exact_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for dim in [2usize, 5] {
            let n = 300;
            let features: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(0.0..4.0)).collect();
            let values: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let ones = vec![1.0; n];
            let lattice = Lattice::new(&features, dim);
            let approx = normalized(&lattice.filter(&values, 1), &lattice.filter(&ones, 1));
            let exact = normalized(
                &exact_filter(&features, dim, &values, 1),
                &exact_filter(&features, dim, &ones, 1),
            );
            let mean_err: f64 =
                approx.iter().zip(&exact).map(|(a, e)| (a - e).abs()).sum::<f64>() / n as f64;
            assert!(mean_err < 0.05, "dim {dim}: mean abs error {mean_err}");
        }
    }

    #[test]
    fn far_apart_clusters_do_not_mix() {
        let mut features = Vec::new();
        let mut values = Vec::new();
        for i in 0..10 {
            features.extend([i as f64 * 0.05, 0.0]);
            values.push(1.0);
        }
        for i in 0..10 {
            features.extend([100.0 + i as f64 * 0.05, 0.0]);
            values.push(0.0);
        }
        let lattice = Lattice::new(&features, 2);
        let out = lattice.filter(&values, 1);
        assert!(out[10..].iter().all(|&v| v.abs() < 1e-12));
        assert!(out[..10].iter().all(|&v| v > 0.0));
    }

    #[test]
    fn multi_channel_matches_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 50;
        let features: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(0.0..3.0)).collect();
        let a: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let joint: Vec<f64> = a.iter().zip(&b).flat_map(|(x, y)| [*x, *y]).collect();
        let lattice = Lattice::new(&features, 3);
        let both = lattice.filter(&joint, 2);
        let fa = lattice.filter(&a, 1);
        let fb = lattice.filter(&b, 1);
        for i in 0..n {
            assert!((both[2 * i] - fa[i]).abs() < 1e-12);
            assert!((both[2 * i + 1] - fb[i]).abs() < 1e-12);
        }
    }
}
