//! Dense kernels shared by inference and training. Every activation matrix
//! is row-major with one row per token.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2, Axis, Zip};

use super::params::{LayerNorm, Linear};

pub(crate) const NORM_EPS: f64 = 1e-5;

pub(crate) fn linear(x: ArrayView2<f64>, l: &Linear) -> Array2<f64> {
    let mut y = x.dot(&l.weight);
    y += &l.bias;
    y
}

/// Accumulates weight and bias gradients into `g`; returns the input gradient.
pub(crate) fn linear_backward(
    x: ArrayView2<f64>,
    l: &Linear,
    dy: ArrayView2<f64>,
    g: &mut Linear,
) -> Array2<f64> {
    general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut g.weight);
    g.bias += &dy.sum_axis(Axis(0));
    dy.dot(&l.weight.t())
}

/// Like [`linear_backward`] but adds the input gradient into `dx`.
pub(crate) fn linear_backward_into(
    x: ArrayView2<f64>,
    l: &Linear,
    dy: ArrayView2<f64>,
    g: &mut Linear,
    dx: &mut Array2<f64>,
) {
    general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut g.weight);
    g.bias += &dy.sum_axis(Axis(0));
    general_mat_mul(1.0, &dy, &l.weight.t(), 1.0, dx);
}

pub(crate) struct NormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

pub(crate) fn layer_norm(x: ArrayView2<f64>, ln: &LayerNorm) -> Array2<f64> {
    layer_norm_cached(x, ln).0
}

pub(crate) fn layer_norm_cached(x: ArrayView2<f64>, ln: &LayerNorm) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + NORM_EPS).sqrt();
        row *= *r;
    }
    let mut y = &xhat * &ln.gain;
    y += &ln.bias;
    (y, NormCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward(
    cache: &NormCache,
    ln: &LayerNorm,
    dy: ArrayView2<f64>,
    g: &mut LayerNorm,
) -> Array2<f64> {
    g.gain += &(&dy * &cache.xhat).sum_axis(Axis(0));
    g.bias += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let mut dx = &dy * &ln.gain;
    for ((mut row, xh), &r) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.rstd.iter())
    {
        let mean = row.sum() / d;
        let dot = row.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        Zip::from(&mut row).and(&xh).for_each(|v, &h| {
            *v = r * (*v - mean - h * dot);
        });
    }
    dx
}

pub(crate) fn relu_inplace(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub(crate) fn silu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v * sigmoid(v))
}

pub(crate) fn silu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut out = dy.clone();
    Zip::from(&mut out).and(x).for_each(|g, &v| {
        let s = sigmoid(v);
        *g *= s * (1.0 + v * (1.0 - s));
    });
    out
}

pub(crate) fn softmax_rows_inplace(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Natural-log softmax of one logits row.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// Sinusoidal position table, (len, d).
pub(crate) fn positional_table(len: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, d), |(pos, i)| {
        let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Multi-head scaled dot-product attention for one sequence.
///
/// `q` is (n, d); `k` and `v` are (m, d) and already projected. With
/// `causal = Some(offset)`, query row `i` sees keys `0..=offset + i`.
/// Writes the concatenated head outputs into `out` and, when requested,
/// returns the attention probabilities per head.
pub(crate) fn attend(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    heads: usize,
    causal: Option<usize>,
    mut out: ArrayViewMut2<f64>,
    keep_probs: bool,
) -> Vec<Array2<f64>> {
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = Vec::with_capacity(if keep_probs { heads } else { 0 });
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores *= scale;
        if let Some(offset) = causal {
            for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
                for j in (offset + i + 1)..row.len() {
                    row[j] = f64::NEG_INFINITY;
                }
            }
        }
        softmax_rows_inplace(&mut scores);
        out.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        if keep_probs {
            probs.push(scores);
        }
    }
    probs
}

/// Gradients of [`attend`] with respect to `q`, `k`, and `v`, added into the
/// given buffers (which may cover a larger packed batch).
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_backward(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    probs: &[Array2<f64>],
    dout: ArrayView2<f64>,
    mut dq: ArrayViewMut2<f64>,
    mut dk: ArrayViewMut2<f64>,
    mut dv: ArrayViewMut2<f64>,
) {
    let heads = probs.len();
    let dh = q.ncols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for (h, p) in probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let d_o = dout.slice(cols);
        general_mat_mul(1.0, &p.t(), &d_o, 1.0, &mut dv.slice_mut(cols));
        let mut ds = d_o.dot(&v.slice(cols).t());
        for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
            let dot: f64 = row.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
            Zip::from(&mut row).and(&prow).for_each(|g, &pv| {
                *g = pv * (*g - dot) * scale;
            });
        }
        general_mat_mul(1.0, &ds, &k.slice(cols), 1.0, &mut dq.slice_mut(cols));
        general_mat_mul(1.0, &ds.t(), &q.slice(cols), 1.0, &mut dk.slice_mut(cols));
    }
}
