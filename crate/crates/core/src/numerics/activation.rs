use super::Matrix;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// `0.5·(1 + tanh(u))` written as the logistic `1 / (1 + e^(-2u))`: the
/// same value, one `exp` instead of a `tanh`, and no cancellation.
#[inline]
fn half_one_plus_tanh(u: f64) -> f64 {
    1.0 / (1.0 + (-2.0 * u).exp())
}

/// Tanh-approximated GELU of a scalar.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    x * half_one_plus_tanh(inner)
}

/// Exact derivative of [`gelu_scalar`].
#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let s = half_one_plus_tanh(inner);
    let d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    // 1 - tanh² = 4·s·(1 - s)
    s + 2.0 * x * s * (1.0 - s) * d_inner
}

pub fn gelu(x: &Matrix) -> Matrix {
    x.map(gelu_scalar)
}

pub fn gelu_grad(x: &Matrix) -> Matrix {
    x.map(gelu_grad_scalar)
}

/// `upstream ⊙ gelu'(pre)`, the backward pass through a GELU whose input was `pre`.
pub(crate) fn gelu_backward(pre: &Matrix, upstream: &Matrix) -> Matrix {
    assert_eq!(pre.shape(), upstream.shape());
    let data = pre
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| g * gelu_grad_scalar(x))
        .collect();
    Matrix::from_vec(pre.rows(), pre.cols(), data).expect("shape preserved")
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    softmax_rows_in_place(&mut out);
    out
}

pub(crate) fn softmax_rows_in_place(x: &mut Matrix) {
    for r in 0..x.rows() {
        softmax_slice(x.row_mut(r));
    }
}

fn softmax_slice(row: &mut [f64]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Backward through a row softmax: `dS = P ⊙ (dP - rowsum(dP ⊙ P))`.
pub(crate) fn softmax_rows_backward(probs: &Matrix, d_probs: &Matrix) -> Matrix {
    assert_eq!(probs.shape(), d_probs.shape());
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let g = d_probs.row(r);
        let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for ((o, &pv), &gv) in out.row_mut(r).iter_mut().zip(p).zip(g) {
            *o = pv * (gv - inner);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_tanh_form() {
        for i in -400..=400 {
            let x = i as f64 * 0.05;
            let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
            let reference = 0.5 * x * (1.0 + u.tanh());
            assert!((gelu_scalar(x) - reference).abs() <= 1e-15 * (1.0 + x.abs()), "x={x}");
        }
        assert_eq!(gelu_scalar(-1e3), 0.0);
        assert_eq!(gelu_grad_scalar(-1e3), 0.0);
    }

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
        assert!(gelu_scalar(-10.0).abs() < 1e-6);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        let eps = 1e-5;
        for x in [-2.0, -0.5, 0.5, 2.0] {
            let fd = (gelu_scalar(x + eps) - gelu_scalar(x - eps)) / (2.0 * eps);
            assert!((fd - gelu_grad_scalar(x)).abs() < 1e-6, "x={x}");
        }
    }

    #[test]
    fn softmax_cases() {
        let u = softmax_rows(&Matrix::filled(1, 4, 3.7));
        assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let big = softmax_rows(&Matrix::row_vector(vec![1000.0, 0.0]));
        assert!((big.get(0, 0) - 1.0).abs() < 1e-12 && big.get(0, 1) < 1e-12);

        let p = softmax_rows(&Matrix::row_vector(vec![0.0, 3f64.ln()]));
        assert!((p.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((p.get(0, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_backward_matches_central_difference() {
        let x = Matrix::from_vec(2, 3, vec![0.3, -1.2, 0.8, 2.0, 0.1, -0.4]).unwrap();
        let w = Matrix::from_vec(2, 3, vec![1.0, -0.5, 0.25, 0.7, 0.2, -1.1]).unwrap();
        let loss = |x: &Matrix| softmax_rows(x).dot(&w);
        let analytic = softmax_rows_backward(&softmax_rows(&x), &w);
        let eps = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * eps);
            assert!((fd - analytic.data()[i]).abs() < 1e-9);
        }
    }
}
