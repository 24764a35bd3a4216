//! Dense primitives used by the encoder, each with a hand-written backward.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

pub const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// `x W + b` with `w: in×out`, `b: 1×out`.
pub fn linear(x: &ArrayView2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    y += &b.row(0);
    y
}

/// Accumulates weight/bias gradients and returns `dx`.
pub fn linear_backward(
    x: &ArrayView2<f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
    dw: Option<&mut Array2<f64>>,
    db: Option<&mut Array2<f64>>,
) -> Array2<f64> {
    if let Some(dw) = dw {
        ndarray::linalg::general_mat_mul(1.0, &x.t(), dy, 1.0, dw);
    }
    if let Some(db) = db {
        let s = dy.sum_axis(Axis(0));
        let mut row = db.row_mut(0);
        row += &s;
    }
    dy.dot(&w.t())
}

/// Tanh approximation of GELU.
pub fn gelu(u: &Array2<f64>) -> Array2<f64> {
    u.mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()))
}

pub fn gelu_backward(u: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut out = dy.clone();
    Zip::from(&mut out).and(u).for_each(|g, &x| {
        let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
        let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
        *g *= d;
    });
    out
}

pub struct LayerNormCache {
    pub xhat: Array2<f64>,
    pub rstd: Array1<f64>,
}

pub fn layer_norm(
    x: &Array2<f64>,
    gamma: &Array2<f64>,
    beta: &Array2<f64>,
) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| v * rs);
    }
    let mut y = &xhat * &gamma.row(0);
    y += &beta.row(0);
    (y, LayerNormCache { xhat, rstd })
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &Array2<f64>,
    dy: &Array2<f64>,
    dgamma: Option<&mut Array2<f64>>,
    dbeta: Option<&mut Array2<f64>>,
) -> Array2<f64> {
    if let Some(dg) = dgamma {
        let s = (dy * &cache.xhat).sum_axis(Axis(0));
        let mut row = dg.row_mut(0);
        row += &s;
    }
    if let Some(db) = dbeta {
        let s = dy.sum_axis(Axis(0));
        let mut row = db.row_mut(0);
        row += &s;
    }
    let d = dy.ncols() as f64;
    let dxhat = dy * &gamma.row(0);
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let g = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let sum_g = g.sum();
        let sum_gx = g.dot(&xh);
        let r = cache.rstd[i];
        let mut out = dx.row_mut(i);
        Zip::from(&mut out)
            .and(&g)
            .and(&xh)
            .for_each(|o, &gi, &xi| *o = r / d * (d * gi - sum_g - xi * sum_gx));
    }
    dx
}

/// Row-wise softmax with max shifting. The row sum is a left-to-right fold,
/// so entries that underflow to exactly zero leave the result bitwise
/// unchanged wherever they sit.
pub fn softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut p = a.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.fold(0.0, |acc, &v| acc + v);
        row.mapv_inplace(|v| v / s);
    }
    p
}

/// Gradient of the pre-softmax scores given the softmax output `p`.
pub fn softmax_rows_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let mut da = p * dp;
    for (mut row, prow) in da.rows_mut().into_iter().zip(p.rows()) {
        let s = row.sum();
        Zip::from(&mut row)
            .and(&prow)
            .for_each(|g, &pv| *g -= pv * s);
    }
    da
}
