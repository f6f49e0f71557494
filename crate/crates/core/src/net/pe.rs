//! Positional encodings applied inside attention.
//!
//! - Rotary: adjacent coordinate pairs (2j, 2j+1) of queries and keys rotate
//!   by angle pos * base^(-2j/d_head); a pure rotation, so norms are
//!   preserved and q·k depends on positions only through their difference.
//! - ALiBi: no rotation; attention scores receive an additive bias
//!   -slope_h * (i - j) with slope_h = 2^(-8h/H) for head h = 1..H.
//! - APE and Hybrid add a learned table to token embeddings before layer 1
//!   (handled by the forward pass); Hybrid additionally rotates like rotary.

use ndarray::{Array2, ArrayBase, DataMut, Ix2};

use super::PeType;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// ALiBi slope for 0-based head index `head` out of `n_heads`.
pub fn alibi_slope(head: usize, n_heads: usize) -> f64 {
    2.0f64.powf(-8.0 * (head + 1) as f64 / n_heads as f64)
}

/// Rotates each row of `x` (rows x d_head) by its position's angles.
/// `inverse` applies the transpose rotation; it is the exact adjoint used by
/// the backward pass.
pub fn rope_rotate_rows<T: Scalar, S: DataMut<Elem = T>>(
    x: &mut ArrayBase<S, Ix2>,
    positions: &[usize],
    base: f64,
    inverse: bool,
) {
    let d_head = x.ncols();
    debug_assert_eq!(d_head % 2, 0);
    debug_assert_eq!(x.nrows(), positions.len());
    for (r, &pos) in positions.iter().enumerate() {
        let mut row = x.row_mut(r);
        for j in 0..d_head / 2 {
            let theta = pos as f64 * base.powf(-2.0 * j as f64 / d_head as f64);
            let (sin, cos) = theta.sin_cos();
            let (c, s) = (T::from_f64c(cos), T::from_f64c(sin));
            let a = row[2 * j];
            let b = row[2 * j + 1];
            if inverse {
                row[2 * j] = a * c + b * s;
                row[2 * j + 1] = b * c - a * s;
            } else {
                row[2 * j] = a * c - b * s;
                row[2 * j + 1] = a * s + b * c;
            }
        }
    }
}

/// Lower-triangular ALiBi bias matrix for a T x T attention block.
/// Masked (upper-triangular) entries are left at zero; the causal mask
/// overrides them anyway.
pub fn alibi_bias<T: Scalar>(t: usize, head: usize, n_heads: usize) -> Array2<T> {
    let slope = alibi_slope(head, n_heads);
    let mut bias = Array2::zeros((t, t));
    for i in 0..t {
        for j in 0..=i {
            bias[[i, j]] = T::from_f64c(-slope * (i - j) as f64);
        }
    }
    bias
}

/// Applies a positional encoding to per-head query/key row blocks.
///
/// APE is an identity here (the table is added to token embeddings before
/// the first layer); rotary variants rotate `q` and `k` in place; ALiBi
/// returns the additive score bias.
pub fn apply_position<T: Scalar>(
    pe: PeType,
    q: &mut Array2<T>,
    k: &mut Array2<T>,
    positions: &[usize],
    head: usize,
    n_heads: usize,
    rope_base: f64,
    max_t: usize,
) -> Result<Option<Array2<T>>> {
    if let Some(&p) = positions.iter().find(|&&p| p >= max_t) {
        return Err(Error::index(format!("position {p} exceeds max_t {max_t}")));
    }
    match pe {
        PeType::Ape => Ok(None),
        PeType::Rope | PeType::Hybrid => {
            rope_rotate_rows(q, positions, rope_base, false);
            rope_rotate_rows(k, positions, rope_base, false);
            Ok(None)
        }
        PeType::Alibi => Ok(Some(alibi_bias(q.nrows(), head, n_heads))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;
    use crate::rng::rng_for;

    fn random_rows(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_for(seed, 0xBEEF);
        Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn rope_preserves_row_norms() {
        let mut x = random_rows(6, 8, 1);
        let orig = x.clone();
        rope_rotate_rows(&mut x, &[0, 1, 2, 3, 9, 14], 10_000.0, false);
        for (a, b) in x.rows().into_iter().zip(orig.rows()) {
            let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((na - nb).abs() < 1e-10);
        }
    }

    #[test]
    fn rope_dot_products_are_shift_invariant() {
        // dot(q'(m), k'(n)) must match dot(q'(m+s), k'(n+s)) for any shift.
        let q = random_rows(1, 8, 2);
        let k = random_rows(1, 8, 3);
        let dot_at = |m: usize, n: usize| -> f64 {
            let mut qq = q.clone();
            let mut kk = k.clone();
            rope_rotate_rows(&mut qq, &[m], 10_000.0, false);
            rope_rotate_rows(&mut kk, &[n], 10_000.0, false);
            qq.row(0).dot(&kk.row(0))
        };
        let base = dot_at(7, 3);
        for s in [1usize, 5, 11] {
            assert!((dot_at(7 + s, 3 + s) - base).abs() < 1e-9, "shift {s}");
        }
    }

    #[test]
    fn rope_inverse_is_exact_adjoint() {
        let mut x = random_rows(4, 8, 4);
        let orig = x.clone();
        rope_rotate_rows(&mut x, &[1, 2, 3, 4], 10_000.0, false);
        rope_rotate_rows(&mut x, &[1, 2, 3, 4], 10_000.0, true);
        for (a, b) in x.iter().zip(orig.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn alibi_slope_head_one_of_eight_is_half() {
        assert!((alibi_slope(0, 8) - 0.5).abs() < 1e-15);
        // Head 8 of 8: 2^-8.
        assert!((alibi_slope(7, 8) - 2.0f64.powi(-8)).abs() < 1e-15);
    }

    #[test]
    fn alibi_bias_is_distance_scaled() {
        let b = alibi_bias::<f64>(5, 0, 1); // slope 2^-8
        let slope = 2.0f64.powi(-8);
        assert_eq!(b[[0, 0]], 0.0);
        assert!((b[[4, 1]] + slope * 3.0).abs() < 1e-15);
    }

    #[test]
    fn position_overflow_is_an_index_error() {
        let mut q = random_rows(2, 8, 5);
        let mut k = random_rows(2, 8, 6);
        let err = apply_position(
            PeType::Rope,
            &mut q,
            &mut k,
            &[0, 20],
            0,
            1,
            10_000.0,
            17,
        );
        assert!(err.is_err());
    }
}
