//! The per-level head: `linear(C -> D) -> batch norm -> ReLU -> linear(D -> D)`
//! applied independently at every spatial position.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureVolume;

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with the statistics of the current batch.
    Fit,
    /// Normalize with the frozen running statistics.
    Infer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    /// Number of batches folded into the running statistics.
    pub stat_batches: u64,
}

/// Gradients for the trainable parameters of one head.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Intermediate values of a fit-mode forward pass needed by `backward`.
pub struct ForwardCache {
    input: Array2<f64>,
    normalized: Array2<f64>,
    pre_relu: Array2<f64>,
    activated: Array2<f64>,
    inv_std: Array1<f64>,
    batch_mean: Array1<f64>,
    batch_var: Array1<f64>,
}

impl ParamGrads {
    pub fn add(&mut self, other: &ParamGrads) {
        self.w1 += &other.w1;
        self.b1 += &other.b1;
        self.gamma += &other.gamma;
        self.beta += &other.beta;
        self.w2 += &other.w2;
        self.b2 += &other.b2;
    }
}

impl AdapterParams {
    /// Fan-in scaled uniform initialization, identity normalization.
    pub fn init(in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        let b_in = 1.0 / (in_channels as f64).sqrt();
        let b_hidden = 1.0 / (out_channels as f64).sqrt();
        let mut uniform = |bound: f64, shape: (usize, usize)| {
            Array2::from_shape_simple_fn(shape, || rng.gen_range(-bound..bound))
        };
        let w1 = uniform(b_in, (in_channels, out_channels));
        let b1 = uniform(b_in, (1, out_channels)).into_shape_with_order(out_channels).unwrap();
        let w2 = uniform(b_hidden, (out_channels, out_channels));
        let b2 = uniform(b_hidden, (1, out_channels)).into_shape_with_order(out_channels).unwrap();
        Self {
            w1,
            b1,
            gamma: Array1::ones(out_channels),
            beta: Array1::zeros(out_channels),
            w2,
            b2,
            running_mean: Array1::zeros(out_channels),
            running_var: Array1::ones(out_channels),
            stat_batches: 0,
        }
    }

    pub fn seeded(in_channels: usize, out_channels: usize, seed: u64) -> Self {
        Self::init(in_channels, out_channels, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn in_channels(&self) -> usize {
        self.w1.nrows()
    }

    pub fn out_channels(&self) -> usize {
        self.w2.ncols()
    }

    pub fn is_finite(&self) -> bool {
        [&self.b1, &self.gamma, &self.beta, &self.b2, &self.running_mean, &self.running_var]
            .iter()
            .all(|a| a.iter().all(|v| v.is_finite()))
            && self.w1.iter().chain(self.w2.iter()).all(|v| v.is_finite())
    }

    /// Forward pass over the rows of `input` (positions x channels).
    pub fn forward_matrix(&self, input: ArrayView2<'_, f64>, mode: Mode) -> Result<Array2<f64>> {
        match mode {
            Mode::Fit => self.forward_fit(input).map(|(y, _)| y),
            Mode::Infer => {
                self.check_input(input)?;
                let z1 = input.dot(&self.w1) + &self.b1;
                let inv_std = self.running_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                let normalized = (z1 - &self.running_mean) * &inv_std;
                let activated = (normalized * &self.gamma + &self.beta).mapv(|v| v.max(0.0));
                Ok(activated.dot(&self.w2) + &self.b2)
            }
        }
    }

    pub fn forward_fit(&self, input: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(input)?;
        let n = input.nrows() as f64;
        let z1 = input.dot(&self.w1) + &self.b1;
        let batch_mean = z1.mean_axis(Axis(0)).expect("non-empty batch");
        let centered = &z1 - &batch_mean;
        let batch_var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std = batch_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let normalized = centered * &inv_std;
        let pre_relu = &normalized * &self.gamma + &self.beta;
        let activated = pre_relu.mapv(|v| v.max(0.0));
        let output = activated.dot(&self.w2) + &self.b2;
        let cache = ForwardCache {
            input: input.to_owned(),
            normalized,
            pre_relu,
            activated,
            inv_std,
            batch_mean,
            batch_var,
        };
        Ok((output, cache))
    }

    pub fn backward(&self, cache: &ForwardCache, grad_out: ArrayView2<'_, f64>) -> ParamGrads {
        let n = grad_out.nrows() as f64;
        let w2 = cache.activated.t().dot(&grad_out);
        let b2 = grad_out.sum_axis(Axis(0));
        let mut grad_pre = grad_out.dot(&self.w2.t());
        grad_pre.zip_mut_with(&cache.pre_relu, |g, &z| {
            if z <= 0.0 {
                *g = 0.0;
            }
        });
        let gamma = (&grad_pre * &cache.normalized).sum_axis(Axis(0));
        let beta = grad_pre.sum_axis(Axis(0));
        let grad_norm = grad_pre * &self.gamma;
        let sum_g = grad_norm.sum_axis(Axis(0));
        let sum_gx = (&grad_norm * &cache.normalized).sum_axis(Axis(0));
        let grad_z1 = (grad_norm * n - &sum_g - &cache.normalized * &sum_gx) * &(&cache.inv_std / n);
        let w1 = cache.input.t().dot(&grad_z1);
        let b1 = grad_z1.sum_axis(Axis(0));
        ParamGrads {
            w1,
            b1,
            gamma,
            beta,
            w2,
            b2,
        }
    }

    /// Folds a fit batch into the running statistics as a cumulative average
    /// of batch means and population variances.
    pub fn record_batch_stats(&mut self, cache: &ForwardCache) {
        if self.stat_batches == 0 {
            self.running_mean.assign(&cache.batch_mean);
            self.running_var.assign(&cache.batch_var);
        } else {
            let k = self.stat_batches as f64;
            self.running_mean = (&self.running_mean * k + &cache.batch_mean) / (k + 1.0);
            self.running_var = (&self.running_var * k + &cache.batch_var) / (k + 1.0);
        }
        self.stat_batches += 1;
    }

    fn check_input(&self, input: ArrayView2<'_, f64>) -> Result<()> {
        if input.ncols() != self.in_channels() {
            return Err(Error::shape(format!(
                "adapter expects {} input channels, got {}",
                self.in_channels(),
                input.ncols()
            )));
        }
        if input.nrows() == 0 {
            return Err(Error::Empty("adapter input has no positions".into()));
        }
        Ok(())
    }
}

/// Applies a head to a feature volume; spatial shape is preserved.
pub fn adapter_forward(
    features: &FeatureVolume,
    params: &AdapterParams,
    mode: Mode,
) -> Result<FeatureVolume> {
    let out = params.forward_matrix(features.matrix(), mode)?;
    FeatureVolume::new(features.height(), features.width(), out)
}
