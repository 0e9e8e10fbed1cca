//! Row-wise building blocks and their derivatives.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

pub const LN_EPS: f64 = 1e-6;

/// Per-row statistics kept from a LayerNorm forward pass.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub normalized: Array2<f64>,
    pub rstd: Array1<f64>,
}

/// LayerNorm over the last axis: `y = (x - mean) / sqrt(var + eps) * gamma + beta`.
pub fn layer_norm(x: ArrayView2<f64>, gamma: ArrayView1<f64>, beta: ArrayView1<f64>) -> (Array2<f64>, NormCache) {
    let (rows, d) = x.dim();
    let mut normalized = Array2::zeros((rows, d));
    let mut rstd = Array1::zeros(rows);
    for ((xr, mut nr), rs) in x.rows().into_iter().zip(normalized.rows_mut()).zip(rstd.iter_mut()) {
        let mean = xr.sum() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        *rs = 1.0 / (var + LN_EPS).sqrt();
        Zip::from(&mut nr).and(&xr).for_each(|n, &v| *n = (v - mean) * *rs);
    }
    let mut y = &normalized * &gamma;
    y += &beta;
    (y, NormCache { normalized, rstd })
}

/// Returns `dx`; accumulates into `dgamma` and `dbeta`.
pub fn layer_norm_backward(
    dy: ArrayView2<f64>,
    cache: &NormCache,
    gamma: ArrayView1<f64>,
    dgamma: &mut Array1<f64>,
    dbeta: &mut Array1<f64>,
) -> Array2<f64> {
    let d = dy.ncols() as f64;
    *dgamma += &(&dy * &cache.normalized).sum_axis(Axis(0));
    *dbeta += &dy.sum_axis(Axis(0));
    let dxhat = &dy * &gamma;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((gr, nr), mut dr), &rs) in
        dxhat.rows().into_iter().zip(cache.normalized.rows()).zip(dx.rows_mut()).zip(cache.rstd.iter())
    {
        let mean_g = gr.sum() / d;
        let mean_gn = gr.iter().zip(nr.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        Zip::from(&mut dr).and(&gr).and(&nr).for_each(|o, &g, &n| *o = rs * (g - mean_g - n * mean_gn));
    }
    dx
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Numerically stable softmax along each row, in place.
pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let row = row.as_slice_mut().expect("rows are contiguous");
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Gradient of the pre-softmax scores given the softmax output `p` and `dp`.
pub fn softmax_rows_backward(p: ArrayView2<f64>, dp: ArrayView2<f64>) -> Array2<f64> {
    let mut ds = Array2::zeros(p.raw_dim());
    for ((mut out, pr), dr) in ds.rows_mut().into_iter().zip(p.rows()).zip(dp.rows()) {
        let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
        Zip::from(&mut out).and(&pr).and(&dr).for_each(|o, &pv, &dv| *o = pv * (dv - dot));
    }
    ds
}

/// `x W + b` for row-major activations.
pub fn linear(x: ArrayView2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    y += b;
    y
}

/// Accumulates `dW += x^T dy`, `db += sum(dy)` and returns `dx = dy W^T`.
pub fn linear_backward(
    x: ArrayView2<f64>,
    dy: ArrayView2<f64>,
    w: &Array2<f64>,
    dw: &mut Array2<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    ndarray::linalg::general_mat_mul(1.0, &x.t(), &dy, 1.0, dw);
    *db += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut x = array![[1.0, 2.0, 3.0], [1000.0, 1000.0, -1000.0]];
        softmax_rows(&mut x);
        for row in x.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((x[[1, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn layer_norm_backward_matches_difference() {
        let x = array![[0.3, -1.2, 2.0, 0.5], [1.0, 1.5, -0.5, 0.0]];
        let g = array![1.1, 0.9, -0.4, 2.0];
        let b = array![0.1, 0.0, -0.2, 0.3];
        let w = array![[0.2, -1.0, 0.5, 1.5], [-0.3, 0.8, 1.2, -0.6]];
        let f = |x: &Array2<f64>| (&layer_norm(x.view(), g.view(), b.view()).0 * &w).sum();
        let (_, cache) = layer_norm(x.view(), g.view(), b.view());
        let mut dg = Array1::zeros(4);
        let mut db = Array1::zeros(4);
        let dx = layer_norm_backward(w.view(), &cache, g.view(), &mut dg, &mut db);
        for i in 0..2 {
            for j in 0..4 {
                let mut p = x.clone();
                let mut m = x.clone();
                p[[i, j]] += 1e-6;
                m[[i, j]] -= 1e-6;
                let fd = (f(&p) - f(&m)) / 2e-6;
                assert!((fd - dx[[i, j]]).abs() < 1e-7, "{fd} vs {}", dx[[i, j]]);
            }
        }
        assert_eq!(db, w.sum_axis(Axis(0)));
    }
}
