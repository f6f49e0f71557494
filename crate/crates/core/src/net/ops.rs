//! Row-wise numerical primitives and their analytic derivatives.
//!
//! Derivative conventions: `d*_backward(x, ..., dy)` returns the gradient of
//! a scalar loss with respect to `x` given its gradient `dy` with respect to
//! the op's output, using the cached forward inputs.

use ndarray::{Array1, Array2};

use crate::scalar::Scalar;

/// RMSNorm variance-floor epsilon.
pub const RMS_EPS: f64 = 1e-6;

/// Normalizes one vector: x * gain / sqrt(mean(x^2) + eps).
pub fn rmsnorm<T: Scalar>(x: &Array1<T>, gain: &Array1<T>) -> Array1<T> {
    let d = x.len();
    let ms = x.iter().fold(T::zero(), |a, &v| a + v * v) / T::from_f64c(d as f64);
    let inv = (ms + T::from_f64c(RMS_EPS)).sqrt().recip();
    let mut y = x.clone();
    for (j, v) in y.iter_mut().enumerate() {
        *v = *v * gain[j] * inv;
    }
    y
}

/// Row-wise RMSNorm over a matrix. Returns the normalized rows and the
/// per-row inverse RMS needed by the backward pass.
pub fn rmsnorm_rows<T: Scalar>(x: &Array2<T>, gain: &Array1<T>) -> (Array2<T>, Array1<T>) {
    let (r, d) = x.dim();
    let dd = T::from_f64c(d as f64);
    let eps = T::from_f64c(RMS_EPS);
    let mut y = Array2::zeros((r, d));
    let mut inv = Array1::zeros(r);
    for i in 0..r {
        let row = x.row(i);
        let ms = row.iter().fold(T::zero(), |a, &v| a + v * v) / dd;
        let s = (ms + eps).sqrt().recip();
        inv[i] = s;
        let mut out = y.row_mut(i);
        for j in 0..d {
            out[j] = row[j] * gain[j] * s;
        }
    }
    (y, inv)
}

/// Backward of [`rmsnorm_rows`].
///
/// With r = 1/sqrt(mean(x^2) + eps):
///   dx_j = g_j r dy_j - x_j r^3 / d * sum_i(dy_i g_i x_i)
///   dg_j = sum_rows dy_j x_j r
pub fn rmsnorm_rows_backward<T: Scalar>(
    x: &Array2<T>,
    gain: &Array1<T>,
    inv: &Array1<T>,
    dy: &Array2<T>,
) -> (Array2<T>, Array1<T>) {
    let (r, d) = x.dim();
    let dd = T::from_f64c(d as f64);
    let mut dx = Array2::zeros((r, d));
    let mut dg = Array1::zeros(d);
    for i in 0..r {
        let xi = x.row(i);
        let dyi = dy.row(i);
        let s = inv[i];
        let mut inner = T::zero();
        for j in 0..d {
            inner = inner + dyi[j] * gain[j] * xi[j];
        }
        let coef = inner * s * s * s / dd;
        let mut dxi = dx.row_mut(i);
        for j in 0..d {
            dxi[j] = gain[j] * s * dyi[j] - xi[j] * coef;
            dg[j] = dg[j] + dyi[j] * xi[j] * s;
        }
    }
    (dx, dg)
}

/// SiLU activation x * sigmoid(x), element-wise.
pub fn silu<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    x.mapv(|v| v * sigmoid(v))
}

/// Backward of [`silu`]: dy * (s + x s (1 - s)) with s = sigmoid(x).
pub fn silu_backward<T: Scalar>(x: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |g, &v| {
        let s = sigmoid(v);
        *g = *g * (s + v * s * (T::one() - s));
    });
    dx
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    (T::one() + (-v).exp()).recip()
}

/// Numerically stable in-place softmax of one row. Entries equal to negative
/// infinity (masked positions) map to exactly zero.
pub fn softmax_row<T: Scalar>(row: &mut [T]) {
    let mut m = row[0];
    for &v in row.iter() {
        if v > m {
            m = v;
        }
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Backward of row-wise softmax: dS = A * (dA - rowsum(dA * A)).
pub fn softmax_rows_backward<T: Scalar>(a: &Array2<T>, da: &Array2<T>) -> Array2<T> {
    let (r, c) = a.dim();
    let mut ds = Array2::zeros((r, c));
    for i in 0..r {
        let ai = a.row(i);
        let dai = da.row(i);
        let mut dot = T::zero();
        for j in 0..c {
            dot = dot + ai[j] * dai[j];
        }
        let mut out = ds.row_mut(i);
        for j in 0..c {
            out[j] = ai[j] * (dai[j] - dot);
        }
    }
    ds
}

/// Mean cross-entropy of row logits against integer targets, with the logit
/// gradient of the *sum* (caller scales by 1/batch). Uses log-sum-exp for
/// stability. Returns (summed loss, dlogits_of_sum).
pub fn cross_entropy_sum<T: Scalar>(
    logits: &Array2<T>,
    targets: &[usize],
) -> (f64, Array2<T>) {
    let (r, c) = logits.dim();
    assert_eq!(r, targets.len());
    let mut dl = Array2::zeros((r, c));
    let mut loss = 0.0f64;
    for i in 0..r {
        let row = logits.row(i);
        let mut m = row[0];
        for &v in row.iter() {
            if v > m {
                m = v;
            }
        }
        let mut sum = T::zero();
        for &v in row.iter() {
            sum = sum + (v - m).exp();
        }
        let lse = m + sum.ln();
        loss += (lse - row[targets[i]]).to_f64c();
        let mut out = dl.row_mut(i);
        for j in 0..c {
            out[j] = (row[j] - lse).exp();
        }
        out[targets[i]] = out[targets[i]] - T::one();
    }
    (loss, dl)
}

/// Argmax with ties broken by the lowest index.
pub fn argmax_row<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rmsnorm_unit_rms_is_identity() {
        let x = Array1::from_elem(8, 1.0f64);
        let g = Array1::from_elem(8, 1.0f64);
        let y = rmsnorm(&x, &g);
        for v in y.iter() {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rmsnorm_scale_invariant_for_positive_constant_rows() {
        let g = Array1::from_elem(8, 1.0f64);
        for c in [0.5, 3.0, 250.0] {
            let x = Array1::from_elem(8, c);
            let y = rmsnorm(&x, &g);
            for v in y.iter() {
                assert!((v - 1.0).abs() < 1e-5, "c={c}");
            }
        }
    }

    #[test]
    fn rmsnorm_hand_oracle_three_four() {
        // mean(x^2) = 12.5, output = [3,4]/sqrt(12.5 + 1e-6).
        let x = array![3.0f64, 4.0];
        let g = array![1.0f64, 1.0];
        let y = rmsnorm(&x, &g);
        let denom = (12.5f64 + 1e-6).sqrt();
        assert!((y[0] - 3.0 / denom).abs() < 1e-12);
        assert!((y[1] - 4.0 / denom).abs() < 1e-12);
        assert!((y[0] - 0.8485).abs() < 1e-4);
        assert!((y[1] - 1.1314).abs() < 1e-4);
    }

    #[test]
    fn softmax_row_sums_to_one_and_masks_to_zero() {
        let mut row = [1.0f64, 2.0, f64::NEG_INFINITY, 0.5];
        softmax_row(&mut row);
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert_eq!(row[2], 0.0);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_l() {
        let logits = Array2::<f64>::zeros((4, 32));
        let targets = [0usize, 5, 9, 31];
        let (loss_sum, dl) = cross_entropy_sum(&logits, &targets);
        assert!((loss_sum / 4.0 - (32.0f64).ln()).abs() < 1e-12);
        // d/dlogit = softmax - onehot = 1/32 - onehot.
        assert!((dl[[0, 0]] - (1.0 / 32.0 - 1.0)).abs() < 1e-12);
        assert!((dl[[0, 1]] - 1.0 / 32.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax_row(&[0.0f32, 1.0, 1.0, 0.5]), 1);
        assert_eq!(argmax_row(&[2.0f32, 2.0]), 0);
    }

    #[test]
    fn silu_matches_definition() {
        let x = array![[0.0f64, 1.0, -2.0]];
        let y = silu(&x);
        assert_eq!(y[[0, 0]], 0.0);
        assert!((y[[0, 1]] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn silu_backward_matches_finite_difference() {
        let x = array![[0.3f64, -1.2, 2.0, 0.0]];
        let dy = array![[1.0f64, 1.0, 1.0, 1.0]];
        let dx = silu_backward(&x, &dy);
        let h = 1e-6;
        for j in 0..4 {
            let mut xp = x.clone();
            xp[[0, j]] += h;
            let mut xm = x.clone();
            xm[[0, j]] -= h;
            let fd = (silu(&xp).sum() - silu(&xm).sum()) / (2.0 * h);
            assert!((dx[[0, j]] - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn rmsnorm_backward_matches_finite_difference() {
        let x = array![[0.4f64, -1.0, 2.2, 0.1], [1.0, 1.0, -0.5, 0.0]];
        let g = array![0.9f64, 1.1, 1.0, 0.7];
        let (y, inv) = rmsnorm_rows(&x, &g);
        // Loss = sum of squares of outputs; dy = 2y.
        let dy = y.mapv(|v| 2.0 * v);
        let (dx, dg) = rmsnorm_rows_backward(&x, &g, &inv, &dy);
        let loss = |xx: &Array2<f64>, gg: &Array1<f64>| -> f64 {
            let (yy, _) = rmsnorm_rows(xx, gg);
            yy.iter().map(|v| v * v).sum()
        };
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..4 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (loss(&xp, &g) - loss(&xm, &g)) / (2.0 * h);
                assert!((dx[[i, j]] - fd).abs() < 1e-6, "dx[{i},{j}]");
            }
        }
        for j in 0..4 {
            let mut gp = g.clone();
            gp[j] += h;
            let mut gm = g.clone();
            gm[j] -= h;
            let fd = (loss(&x, &gp) - loss(&x, &gm)) / (2.0 * h);
            assert!((dg[j] - fd).abs() < 1e-6, "dg[{j}]");
        }
    }
}
