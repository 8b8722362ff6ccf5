//! Row-wise activations and their backward passes.

use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Softmax over each row, with max-subtraction for stability.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    if !m.is_finite() {
        return Err(Error::NonFinite { op: "softmax_rows" });
    }
    let mut out = m.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Gradient of softmax: given probabilities `p` and upstream `dp`, overwrite `dp` with dlogits.
pub(crate) fn softmax_backward_in_place(p: &[f64], dp: &mut [f64]) {
    let s: f64 = p.iter().zip(dp.iter()).map(|(a, b)| a * b).sum();
    for (d, &pi) in dp.iter_mut().zip(p) {
        *d = pi * (*d - s);
    }
}

/// Per-row statistics kept from a layer-norm forward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Matrix,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm_rows(m: &Matrix, gain: &[f64], bias: &[f64], eps: f64) -> Result<Matrix> {
    Ok(layer_norm_forward(m, gain, bias, eps)?.0)
}

pub(crate) fn layer_norm_forward(
    m: &Matrix,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> Result<(Matrix, LayerNormCache)> {
    let d = m.cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::shape(
            "layer_norm_rows",
            format!("gain {} / bias {} for {d} columns", gain.len(), bias.len()),
        ));
    }
    let mut normalized = Matrix::zeros(m.rows(), d);
    let mut out = Matrix::zeros(m.rows(), d);
    let mut inv_std = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let x = m.row(i);
        let mean = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        inv_std.push(r);
        let nrow = normalized.row_mut(i);
        for (n, &v) in nrow.iter_mut().zip(x) {
            *n = (v - mean) * r;
        }
        let orow = out.row_mut(i);
        for j in 0..d {
            orow[j] = normalized.get(i, j) * gain[j] + bias[j];
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Returns dx; accumulates into `dgain` / `dbias`.
pub(crate) fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &[f64],
    dy: &Matrix,
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Matrix {
    let d = dy.cols();
    let n = d as f64;
    let mut dx = Matrix::zeros(dy.rows(), d);
    let mut dxhat = vec![0.0; d];
    for i in 0..dy.rows() {
        let g = dy.row(i);
        let xhat = cache.normalized.row(i);
        let mut sum = 0.0;
        let mut sum_x = 0.0;
        for j in 0..d {
            dgain[j] += g[j] * xhat[j];
            dbias[j] += g[j];
            dxhat[j] = g[j] * gain[j];
            sum += dxhat[j];
            sum_x += dxhat[j] * xhat[j];
        }
        let r = cache.inv_std[i];
        let out = dx.row_mut(i);
        for j in 0..d {
            out[j] = r * (dxhat[j] - sum / n - xhat[j] * sum_x / n);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable `ln(sum(exp(row)))`.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
