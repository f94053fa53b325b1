use super::Matrix;
use crate::error::{Error, Result};

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Saved state for [`layernorm_backward`].
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
}

/// Per-row layer normalization followed by an elementwise affine map.
pub fn layernorm(x: &Matrix, gamma: &Matrix, beta: &Matrix) -> Result<(Matrix, LayerNormCache)> {
    for (op, v) in [("layernorm gamma", gamma), ("layernorm beta", beta)] {
        if v.rows() != 1 || v.cols() != x.cols() {
            return Err(Error::Dimension {
                op,
                left: x.shape(),
                right: v.shape(),
            });
        }
    }
    let n = x.cols() as f64;
    let mut normalized = Matrix::zeros(x.rows(), x.cols());
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let istd = 1.0 / (var + LAYERNORM_EPS).sqrt();
        inv_std.push(istd);
        let nrow = normalized.row_mut(r);
        for (o, v) in nrow.iter_mut().zip(row) {
            *o = (v - mean) * istd;
        }
        let orow = out.row_mut(r);
        for (((o, xh), g), b) in orow
            .iter_mut()
            .zip(normalized.row(r))
            .zip(gamma.data())
            .zip(beta.data())
        {
            *o = xh * g + b;
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Gradients of a layernorm: `(d_input, d_gamma, d_beta)`.
pub fn layernorm_backward(d_out: &Matrix, cache: &LayerNormCache, gamma: &Matrix) -> (Matrix, Matrix, Matrix) {
    let (rows, cols) = d_out.shape();
    let n = cols as f64;
    let mut dx = Matrix::zeros(rows, cols);
    let mut dgamma = Matrix::zeros(1, cols);
    let mut dbeta = Matrix::zeros(1, cols);
    let mut dxhat = vec![0.0; cols];
    for r in 0..rows {
        let g = d_out.row(r);
        let xh = cache.normalized.row(r);
        for c in 0..cols {
            dgamma.data_mut()[c] += g[c] * xh[c];
            dbeta.data_mut()[c] += g[c];
            dxhat[c] = g[c] * gamma.data()[c];
        }
        let mean_d = dxhat.iter().sum::<f64>() / n;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
        let istd = cache.inv_std[r];
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = istd * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    (dx, dgamma, dbeta)
}
