//! Scaled dot-product attention with the backward pass used in training.

use ndarray::{s, Array2, ArrayView2, Axis};

/// Row-wise softmax in place, max-subtracted.
pub fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Multi-head attention of `q [n, d]` over `k, v [m, d]`; heads split the
/// feature columns evenly. Returns the context `[n, d]` and one probability
/// matrix `[n, m]` per head.
pub fn attend(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    heads: usize,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Array2::zeros((q.nrows(), v.ncols()));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut p = q.slice(cols).dot(&k.slice(cols).t());
        p.mapv_inplace(|x| x * scale);
        softmax_rows(&mut p);
        ctx.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    (ctx, probs)
}

/// Gradients `(dq, dk, dv)` of [`attend`] given the upstream context gradient.
pub fn attend_backward(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    probs: &[Array2<f64>],
    dctx: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let heads = probs.len();
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    for (h, p) in probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dctx_h = dctx.slice(cols);
        dv.slice_mut(cols).assign(&p.t().dot(&dctx_h));
        let dp = dctx_h.dot(&v.slice(cols).t());
        // softmax backward: ds = p * (dp - rowsum(dp * p))
        let inner = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
        let mut ds = p * &(&dp - &inner);
        ds.mapv_inplace(|x| x * scale);
        dq.slice_mut(cols).assign(&ds.dot(&k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&q.slice(cols)));
    }
    (dq, dk, dv)
}
