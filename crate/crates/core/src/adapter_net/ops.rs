//! Elementwise and row-wise primitives shared by the frozen backbone and the
//! adapters, each with its backward pass.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Exact GeLU: `x * Phi(x)` with the Gaussian CDF.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Intermediate values of a row-wise layer norm, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normed: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Row-wise layer norm with affine `gain` and `bias`.
pub fn layer_norm(
    x: ArrayView2<'_, f64>,
    gain: ArrayView1<'_, f64>,
    bias: ArrayView1<'_, f64>,
) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut normed = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in normed.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row *= *s;
    }
    let out = &normed * &gain + bias;
    (out, LayerNormCache { normed, inv_std })
}

/// Backward of [`layer_norm`]. Returns the input gradient and accumulates
/// gain/bias gradients when sinks are given.
pub fn layer_norm_backward(
    dout: ArrayView2<'_, f64>,
    gain: ArrayView1<'_, f64>,
    cache: &LayerNormCache,
    dgain: Option<&mut Array1<f64>>,
    dbias: Option<&mut Array1<f64>>,
) -> Array2<f64> {
    if let Some(dg) = dgain {
        *dg += &(&dout * &cache.normed).sum_axis(Axis(0));
    }
    if let Some(db) = dbias {
        *db += &dout.sum_axis(Axis(0));
    }
    let d = dout.ncols() as f64;
    let mut dx = &dout * &gain;
    for ((mut row, n), &s) in dx.rows_mut().into_iter().zip(cache.normed.rows()).zip(&cache.inv_std) {
        let mean_dn = row.sum() / d;
        let mean_dn_n = row.dot(&n) / d;
        Zip::from(&mut row).and(&n).for_each(|g, &nv| *g = s * (*g - mean_dn - nv * mean_dn_n));
    }
    dx
}

/// In-place numerically stable softmax of each row.
pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Numerically stable softmax of a vector.
pub fn softmax(x: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = x.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut e = x.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e /= sum;
    e
}

pub fn log_sum_exp(x: ArrayView1<'_, f64>) -> f64 {
    let max = x.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn l2_norm(x: ArrayView1<'_, f64>) -> f64 {
    x.dot(&x).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu(0.0), 0.0);
        // Phi(1) = 0.841344746068543
        assert!((gelu(1.0) - 0.841_344_746_068_543).abs() < 1e-14);
        assert!((gelu(-1.0) + 0.158_655_253_931_457).abs() < 1e-14);
        for &x in &[-2.0, -0.3, 0.0, 0.7, 3.1] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let x = array![[0.3, -1.2, 0.8, 2.0], [1.0, 1.5, -0.5, 0.1]];
        let g = array![1.1, 0.9, -0.4, 0.7];
        let b = array![0.1, 0.0, 0.2, -0.3];
        let w = array![[0.5, -0.2, 1.0, 0.3], [-0.7, 0.4, 0.2, 0.9]];
        let f = |x: &Array2<f64>| (&layer_norm(x.view(), g.view(), b.view()).0 * &w).sum();
        let (_, cache) = layer_norm(x.view(), g.view(), b.view());
        let mut dg = Array1::zeros(4);
        let mut db = Array1::zeros(4);
        let dx = layer_norm_backward(w.view(), g.view(), &cache, Some(&mut dg), Some(&mut db));
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..4 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (f(&xp) - f(&xm)) / (2.0 * h);
                assert!((fd - dx[[i, j]]).abs() < 1e-7, "dx[{i},{j}] {fd} vs {}", dx[[i, j]]);
            }
        }
        assert_eq!(db, w.sum_axis(Axis(0)));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut x = array![[1000.0, 1001.0], [-5.0, 5.0]];
        softmax_rows(&mut x);
        for row in x.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-15);
        }
        assert!((log_sum_exp(array![0.0, 0.0].view()) - 2f64.ln()).abs() < 1e-15);
    }
}
