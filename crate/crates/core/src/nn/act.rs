//! Elementwise activations. Backward passes take the cached pre-activation.

use ndarray::{Array2, Array4};

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu_backward(x: &Array4<f64>, gy: &Array4<f64>) -> Array4<f64> {
    let mut gx = gy.clone();
    gx.zip_mut_with(x, |g, &v| {
        let s = sigmoid(v);
        *g *= s * (1.0 + v * (1.0 - s));
    });
    gx
}

pub fn silu2(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu2_backward(x: &Array2<f64>, gy: &Array2<f64>) -> Array2<f64> {
    let mut gx = gy.clone();
    gx.zip_mut_with(x, |g, &v| {
        let s = sigmoid(v);
        *g *= s * (1.0 + v * (1.0 - s));
    });
    gx
}

pub fn sigmoid4(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(sigmoid)
}

pub fn sigmoid4_backward(x: &Array4<f64>, gy: &Array4<f64>) -> Array4<f64> {
    let mut gx = gy.clone();
    gx.zip_mut_with(x, |g, &v| {
        let s = sigmoid(v);
        *g *= s * (1.0 - s);
    });
    gx
}

/// Row-wise log-softmax of a logits matrix.
pub fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}
