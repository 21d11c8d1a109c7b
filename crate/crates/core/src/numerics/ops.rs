use crate::error::{Error, Result};

use super::Matrix;

/// Stability epsilon inside the LayerNorm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row softmax with max subtraction.
pub fn softmax_row(x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `ln Σ exp(x)`, stable.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Intermediate values of a LayerNorm forward pass needed by its backward.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    /// Normalized input before the affine transform.
    pub x_hat: Matrix,
    /// `1 / sqrt(var + eps)` per row.
    pub inv_std: Vec<f64>,
}

/// Row-wise LayerNorm with elementwise affine `gain`, `bias`.
pub fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64]) -> Result<Matrix> {
    layer_norm_with_cache(x, gain, bias).map(|(y, _)| y)
}

pub fn layer_norm_with_cache(
    x: &Matrix,
    gain: &[f64],
    bias: &[f64],
) -> Result<(Matrix, LayerNormCache)> {
    let cols = x.cols();
    if gain.len() != cols || bias.len() != cols {
        return Err(Error::shape(format!(
            "layer_norm over {cols} columns with gain {} / bias {}",
            gain.len(),
            bias.len()
        )));
    }
    let mut x_hat = Matrix::zeros(x.rows(), cols);
    let mut out = Matrix::zeros(x.rows(), cols);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(istd);
        let xh = x_hat.row_mut(r);
        for (h, v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * istd;
        }
        let xh = x_hat.row(r).to_vec();
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = gain[c] * xh[c] + bias[c];
        }
    }
    Ok((out, LayerNormCache { x_hat, inv_std }))
}

/// Backward of [`layer_norm_with_cache`].
///
/// Returns the input gradient and accumulates into `d_gain` / `d_bias`.
pub fn layer_norm_backward(
    d_out: &Matrix,
    cache: &LayerNormCache,
    gain: &[f64],
    d_gain: &mut [f64],
    d_bias: &mut [f64],
) -> Matrix {
    let cols = d_out.cols();
    let n = cols as f64;
    let mut dx = Matrix::zeros(d_out.rows(), cols);
    let mut dxh = vec![0.0; cols];
    for r in 0..d_out.rows() {
        let dy = d_out.row(r);
        let xh = cache.x_hat.row(r);
        for c in 0..cols {
            d_gain[c] += dy[c] * xh[c];
            d_bias[c] += dy[c];
            dxh[c] = dy[c] * gain[c];
        }
        let mean_dxh = dxh.iter().sum::<f64>() / n;
        let mean_dxh_xh = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
        let istd = cache.inv_std[r];
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = istd * (dxh[c] - mean_dxh - xh[c] * mean_dxh_xh);
        }
    }
    dx
}
