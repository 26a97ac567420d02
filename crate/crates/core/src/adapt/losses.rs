//! View-consistency and prototype losses with analytic gradients.
//!
//! All volumes are `positions x channels` matrices. `valid` selects the
//! positions that take part in a term; excluded rows receive zero gradient.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

/// Loss value together with gradients with respect to both inputs.
#[derive(Debug, Clone)]
pub struct PairLoss {
    pub value: f64,
    pub grad_a: Array2<f64>,
    pub grad_b: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct StatLoss {
    pub mean_term: f64,
    pub var_term: f64,
    pub grad_a: Array2<f64>,
    pub grad_b: Array2<f64>,
}

impl StatLoss {
    pub fn value(&self) -> f64 {
        self.mean_term + self.var_term
    }
}

fn valid_indices(valid: &[bool]) -> Vec<usize> {
    valid
        .iter()
        .enumerate()
        .filter_map(|(i, &v)| v.then_some(i))
        .collect()
}

fn gather(m: ArrayView2<'_, f64>, idx: &[usize]) -> Array2<f64> {
    m.select(Axis(0), idx)
}

fn scatter(rows: usize, idx: &[usize], values: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((rows, values.ncols()));
    for (k, &i) in idx.iter().enumerate() {
        out.row_mut(i).assign(&values.row(k));
    }
    out
}

/// Dense InfoNCE between positions of `a` and the same positions of `b`:
/// the positive for anchor `i` is `b_i`, negatives are all other valid `b_j`.
/// Returns `None` when no position is valid.
pub fn loss_nce(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    valid: &[bool],
    tau: f64,
) -> Option<PairLoss> {
    assert_eq!(a.dim(), b.dim(), "nce inputs must have equal shape");
    assert_eq!(valid.len(), a.nrows(), "validity length");
    let idx = valid_indices(valid);
    if idx.is_empty() {
        return None;
    }
    let n = idx.len() as f64;
    let av = gather(a, &idx);
    let bv = gather(b, &idx);
    let mut logits = av.dot(&bv.t()) / tau;
    let mut value = 0.0;
    for (i, mut row) in logits.axis_iter_mut(Axis(0)).enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let positive = row[i];
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        value += max + sum.ln() - positive;
        row /= sum;
        row[i] -= 1.0;
    }
    // `logits` now holds softmax - identity.
    let coeff = logits / (n * tau);
    let grad_av = coeff.dot(&bv);
    let grad_bv = coeff.t().dot(&av);
    Some(PairLoss {
        value: value / n,
        grad_a: scatter(a.nrows(), &idx, &grad_av),
        grad_b: scatter(b.nrows(), &idx, &grad_bv),
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute per-channel difference of means plus that of (population)
/// variances, over the valid positions. Returns `None` when nothing is valid.
pub fn loss_stat(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, valid: &[bool]) -> Option<StatLoss> {
    assert_eq!(a.dim(), b.dim(), "stat inputs must have equal shape");
    assert_eq!(valid.len(), a.nrows(), "validity length");
    let idx = valid_indices(valid);
    if idx.is_empty() {
        return None;
    }
    let n = idx.len() as f64;
    let c = a.ncols() as f64;
    let av = gather(a, &idx);
    let bv = gather(b, &idx);
    let mean_a = av.mean_axis(Axis(0)).expect("non-empty");
    let mean_b = bv.mean_axis(Axis(0)).expect("non-empty");
    let ca = &av - &mean_a;
    let cb = &bv - &mean_b;
    let var_a = ca.mapv(|v| v * v).sum_axis(Axis(0)) / n;
    let var_b = cb.mapv(|v| v * v).sum_axis(Axis(0)) / n;
    let mean_diff = &mean_a - &mean_b;
    let var_diff = &var_a - &var_b;
    let mean_term = mean_diff.mapv(f64::abs).sum() / c;
    let var_term = var_diff.mapv(f64::abs).sum() / c;
    let s_mean = mean_diff.mapv(sign) / (c * n);
    let s_var = var_diff.mapv(sign) * (2.0 / (c * n));
    let grad_av = &ca * &s_var + &s_mean;
    let grad_bv = -(&cb * &s_var + &s_mean);
    Some(StatLoss {
        mean_term,
        var_term,
        grad_a: scatter(a.nrows(), &idx, &grad_av),
        grad_b: scatter(b.nrows(), &idx, &grad_bv),
    })
}

/// Mask-weighted class means, pooled jointly over all supplied shots.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub fg: Option<Array1<f64>>,
    pub bg: Option<Array1<f64>>,
    pub fg_weight: f64,
    pub bg_weight: f64,
}

/// `volumes[k]` pairs with `weights[k]`: per-position foreground weight in
/// `[0, 1]`, or `None` for an excluded position. Foreground pooling uses
/// `m`, background pooling uses `1 - m`.
pub fn masked_prototypes(volumes: &[ArrayView2<'_, f64>], weights: &[Vec<Option<f64>>]) -> Prototypes {
    assert_eq!(volumes.len(), weights.len(), "one weight map per volume");
    let channels = volumes.first().map_or(0, |v| v.ncols());
    let mut fg = Array1::<f64>::zeros(channels);
    let mut bg = Array1::<f64>::zeros(channels);
    let (mut fg_weight, mut bg_weight) = (0.0, 0.0);
    for (vol, w) in volumes.iter().zip(weights) {
        assert_eq!(vol.nrows(), w.len(), "mask size must match volume");
        for (row, m) in vol.axis_iter(Axis(0)).zip(w) {
            let Some(m) = *m else { continue };
            if m > 0.0 {
                fg.scaled_add(m, &row);
                fg_weight += m;
            }
            if m < 1.0 {
                bg.scaled_add(1.0 - m, &row);
                bg_weight += 1.0 - m;
            }
        }
    }
    Prototypes {
        fg: (fg_weight > 0.0).then(|| fg / fg_weight),
        bg: (bg_weight > 0.0).then(|| bg / bg_weight),
        fg_weight,
        bg_weight,
    }
}

pub fn cosine(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> Option<f64> {
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    (nu > 0.0 && nv > 0.0).then(|| u.dot(&v) / (nu * nv))
}

/// Gradient of `cosine(u, v)` with respect to `u`.
fn cosine_grad(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>, cos: f64) -> Array1<f64> {
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    &v / (nu * nv) - &u * (cos / (nu * nu))
}

#[derive(Debug, Clone)]
pub struct ProtoLoss {
    pub value: f64,
    pub grad_fg: Array1<f64>,
    pub grad_fg_aug: Array1<f64>,
    pub grad_bg_aug: Array1<f64>,
}

/// Why a prototype term could not be evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtoSkip {
    MissingForeground,
    MissingAugForeground,
    MissingAugBackground,
    ZeroNorm,
}

/// `-log(e^{c(f, f')} / (e^{c(f, f')} + e^{c(f, b')}))` with cosine `c`.
pub fn loss_proto_vectors(
    fg: ArrayView1<'_, f64>,
    fg_aug: ArrayView1<'_, f64>,
    bg_aug: ArrayView1<'_, f64>,
) -> Result<ProtoLoss, ProtoSkip> {
    let pos = cosine(fg, fg_aug).ok_or(ProtoSkip::ZeroNorm)?;
    let neg = cosine(fg, bg_aug).ok_or(ProtoSkip::ZeroNorm)?;
    let margin = neg - pos;
    // softplus(margin), stable for either sign
    let value = margin.max(0.0) + (-margin.abs()).exp().ln_1p();
    let s = 1.0 / (1.0 + (-margin).exp());
    let grad_fg = cosine_grad(fg, bg_aug, neg) * s - cosine_grad(fg, fg_aug, pos) * s;
    let grad_fg_aug = cosine_grad(fg_aug, fg, pos) * -s;
    let grad_bg_aug = cosine_grad(bg_aug, fg, neg) * s;
    Ok(ProtoLoss {
        value,
        grad_fg,
        grad_fg_aug,
        grad_bg_aug,
    })
}

pub fn loss_proto(original: &Prototypes, augmented: &Prototypes) -> Result<ProtoLoss, ProtoSkip> {
    let fg = original.fg.as_ref().ok_or(ProtoSkip::MissingForeground)?;
    let fg_aug = augmented.fg.as_ref().ok_or(ProtoSkip::MissingAugForeground)?;
    let bg_aug = augmented.bg.as_ref().ok_or(ProtoSkip::MissingAugBackground)?;
    loss_proto_vectors(fg.view(), fg_aug.view(), bg_aug.view())
}

/// Spreads a prototype gradient back onto the pooled positions.
pub(crate) fn prototype_backward(
    grad: &Array1<f64>,
    weights: &[Option<f64>],
    total: f64,
    foreground: bool,
    out: &mut Array2<f64>,
) {
    for (mut row, w) in out.axis_iter_mut(Axis(0)).zip(weights) {
        let Some(m) = *w else { continue };
        let coeff = if foreground { m } else { 1.0 - m };
        if coeff > 0.0 {
            row.scaled_add(coeff / total, grad);
        }
    }
}
