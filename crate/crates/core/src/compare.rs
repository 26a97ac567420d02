//! Query foreground scores from cross-attention-weighted aggregation of
//! support mask values over adapted features.

use ndarray::{concatenate, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::features::FeatureVolume;
use crate::grid::{Grid, ScoreMap};

/// Flattened attention inputs for one level.
#[derive(Debug, Clone)]
pub struct CorrelationInputs {
    /// Query rows, `(H_q W_q) x d`.
    pub query: Array2<f64>,
    pub query_height: usize,
    pub query_width: usize,
    /// Support rows, `(H_s W_s k) x d`.
    pub keys: Array2<f64>,
    /// Support mask value per key row, in `[0, 1]`.
    pub values: Vec<f64>,
}

impl CorrelationInputs {
    pub fn new(query: &FeatureVolume, keys: Array2<f64>, values: Vec<f64>) -> Result<Self> {
        let inputs = Self {
            query: query.matrix().to_owned(),
            query_height: query.height(),
            query_width: query.width(),
            keys,
            values,
        };
        inputs.validate()?;
        Ok(inputs)
    }

    fn validate(&self) -> Result<()> {
        if self.keys.nrows() == 0 {
            return Err(Error::Empty("support has no positions".into()));
        }
        if self.query.ncols() == 0 || self.query.ncols() != self.keys.ncols() {
            return Err(Error::shape(format!(
                "query dim {} vs support dim {}",
                self.query.ncols(),
                self.keys.ncols()
            )));
        }
        if self.values.len() != self.keys.nrows() {
            return Err(Error::shape("one mask value per support position required"));
        }
        if self.query.nrows() != self.query_height * self.query_width {
            return Err(Error::shape("query rows do not match its spatial size"));
        }
        if self.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::shape("mask values must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Concatenates `k` shots along the spatial axis, preserving shot order.
/// `masks[i]` holds the row-major level mask of shot `i`.
pub fn concat_shots(
    supports: &[ArrayView2<'_, f64>],
    masks: &[&[f64]],
) -> Result<(Array2<f64>, Vec<f64>)> {
    if supports.is_empty() {
        return Err(Error::Empty("no support shots".into()));
    }
    if supports.len() != masks.len() {
        return Err(Error::shape("one mask per support shot required"));
    }
    let dim = supports[0].dim();
    if supports.iter().any(|s| s.dim() != dim) {
        return Err(Error::shape("support shots differ in shape"));
    }
    if masks.iter().any(|m| m.len() != dim.0) {
        return Err(Error::shape("mask size does not match support volume"));
    }
    let keys = concatenate(Axis(0), supports).expect("shapes checked");
    let values = masks.iter().flat_map(|m| m.iter().copied()).collect();
    Ok((keys, values))
}

/// `softmax(Q K^T / sqrt(d)) V` reshaped to the query grid.
///
/// Rows use max-subtraction; the weighted sum runs over support indices in
/// ascending order.
pub fn correlation_map(inputs: &CorrelationInputs) -> Result<ScoreMap> {
    inputs.validate()?;
    let d = inputs.query.ncols() as f64;
    let logits = inputs.query.dot(&inputs.keys.t()) / d.sqrt();
    let scores: Vec<f64> = logits
        .axis_iter(Axis(0))
        .map(|row| {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut num = 0.0;
            let mut den = 0.0;
            for (&l, &v) in row.iter().zip(&inputs.values) {
                let e = (l - max).exp();
                num += e * v;
                den += e;
            }
            (num / den).clamp(0.0, 1.0)
        })
        .collect();
    Grid::new(inputs.query_width, inputs.query_height, scores)
}
